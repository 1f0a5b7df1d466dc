import numpy as np
import pytest

from deconfounding_rl import pendulum as P
from deconfounding_rl.cmdp import ExperimentConfig, action_index

EMO = ExperimentConfig(scenario="EmotionalPendulum", p_fail=0.2, odds=4, v_threshold=1.0, irrational_prob=0.7)
N = 100_000


def test_physics_examples():
    s = P.step_physics(P.EnvState(0.0, 0.0), 0.0)
    assert (s.theta, s.v) == (0.0, 0.0)
    s = P.step_physics(P.EnvState(np.pi, 0.0), 0.0)
    assert s.v == pytest.approx(0.0, abs=1e-12) and abs(abs(s.theta) - np.pi) < 1e-12
    s = P.step_physics(P.EnvState(np.pi / 2, 0.0), 0.0)
    assert s.v == pytest.approx(0.75)
    assert s.theta == pytest.approx(np.pi / 2 + 0.0375)


def test_physics_bounds_and_determinism():
    rng = np.random.default_rng(0)
    th = rng.uniform(-np.pi, np.pi, 1000)
    v = rng.uniform(-8, 8, 1000)
    u = rng.uniform(-10, 10, 1000)
    a = P.step_physics(P.EnvState(th, v), u)
    b = P.step_physics(P.EnvState(th, v), u)
    assert np.array_equal(a.theta, b.theta) and np.array_equal(a.v, b.v)
    assert np.all(np.abs(a.v) <= 8) and np.all((a.theta > -np.pi) & (a.theta <= np.pi))


def test_observe():
    rng = np.random.default_rng(1)
    obs = P.observe(P.EnvState(np.zeros(N), np.full(N, 2.0)), rng)
    length = np.hypot(obs[:, 0], obs[:, 1])
    assert np.all((length > 0.5) & (length < 1.5))
    assert abs(length.mean() - 1.0) < 0.002
    assert np.all(obs[:, 1] == 0) and np.all(obs[:, 2] == 2.0)


def test_confounder_marginals():
    rng = np.random.default_rng(2)
    s = np.zeros((N, 3))
    w = P.sample_confounders("EmotionalPendulum", s, P.BehaviorConfig.from_experiment(EMO), rng)
    assert abs(w.w1.mean() - 0.2) < 0.005
    assert abs(w.w2[w.w1].mean() - 0.99) < 0.005
    windy = P.BehaviorConfig(odds=2.5, irrational_prob=0.9, p_fail=0.1)
    w = P.sample_confounders("WindyPendulum", s, windy, rng)
    freq = np.bincount(w.w2, minlength=3) / N
    assert abs(freq[1] - 2.5 / 3.5) < 0.005
    assert np.all(np.abs(freq[[0, 2]] - 0.5 / 3.5) < 0.005)
    assert np.array_equal(w.w1, w.w2 != 1)


def test_wind_force():
    assert P.wind_force(1) == 0 and P.wind_force(0) == -5 and P.wind_force(2) == 5
    with pytest.raises(ValueError):
        P.wind_force(3)
    # at theta = pi/2 the wind has no effect on the effective torque
    assert abs(P.wind_force(2) * np.cos(np.pi / 2)) < 1e-15


def test_behavior_action_rules():
    rng = np.random.default_rng(3)
    s = np.tile([1.0, 0.0, 3.0], (1000, 1))  # |v| > v_T
    w = P.ConfounderDraw(np.ones(1000, bool), np.ones(1000, np.int64))
    cfg = P.BehaviorConfig(odds=4, irrational_prob=1.0, v_threshold=1.0, p_fail=0.2)
    a = P.behavior_action("EmotionalPendulum", s, w, P.scripted_rational_policy, cfg, rng)
    assert np.all(a == action_index(-2))  # slow-down opposes v > 0
    cfg0 = P.BehaviorConfig(odds=4, irrational_prob=0.0, v_threshold=1.0, p_fail=0.2)
    s = np.random.default_rng(4).normal(size=(1000, 3))
    a = P.behavior_action("EmotionalPendulum", s, w, P.scripted_rational_policy, cfg0, rng)
    assert np.array_equal(a, P.scripted_rational_policy(s))


def test_windy_action_split():
    rng = np.random.default_rng(5)
    # state where rational, anti-wind and slow-down all differ
    s = np.tile([np.cos(0.3), np.sin(0.3), 0.5], (N, 1))
    w = P.ConfounderDraw(np.ones(N, bool), np.full(N, 2))
    cfg = P.BehaviorConfig(odds=2.5, irrational_prob=0.9, p_fail=0.1)
    rational = lambda x: np.full(len(x), action_index(1))
    a = P.behavior_action("WindyPendulum", s, w, rational, cfg, rng)
    freq = np.bincount(a, minlength=5) / N
    assert abs(freq[action_index(-2)] - 0.9) < 0.01  # anti-wind and slow-down coincide here
    assert abs(freq[action_index(1)] - 0.1) < 0.01
    s[:, 2] = -0.5  # now slow-down is +2, anti-wind stays -2
    a = P.behavior_action("WindyPendulum", s, w, rational, cfg, rng)
    freq = np.bincount(a, minlength=5) / N
    assert abs(freq[action_index(-2)] - 0.45) < 0.01
    assert abs(freq[action_index(2)] - 0.45) < 0.01
    assert abs(freq[action_index(1)] - 0.10) < 0.01


@pytest.mark.parametrize("p_fail,same", [(0.0, 1.0), (0.2, 0.84), (1.0, 0.2)])
def test_intermediate_action(p_fail, same):
    rng = np.random.default_rng(6)
    a = np.full(N, 2)
    m = P.intermediate_action(a, p_fail, rng)
    freq = np.bincount(m, minlength=5) / N
    assert abs(freq[2] - same) < 0.005
    assert np.all(np.abs(np.delete(freq, 2) - (1 - same) / 4) < 0.005)


def test_reward_examples():
    rng = np.random.default_rng(7)
    st = P.EnvState(np.zeros(N), np.zeros(N))
    off = P.ConfounderDraw(np.zeros(N, bool), np.zeros(N, np.int64))
    on = P.ConfounderDraw(np.ones(N, bool), np.ones(N, np.int64))
    assert abs(P.reward("EmotionalPendulum", st, 0.0, off, rng).mean()) < 0.02
    assert abs(P.reward("EmotionalPendulum", st, 0.0, on, rng).mean() - 10) < 0.02
    assert P.base_reward(P.EnvState(np.pi, 8.0), 2.0) == pytest.approx(-(np.pi**2 + 6.4 + 0.004))


def test_controller_regimes():
    up = np.array([np.cos(0.1), np.sin(0.1), 0.0])
    assert P.scripted_rational_policy(up) in (action_index(-1), action_index(-2))
    down = np.array([-1.0, 0.0, 0.0])
    assert P.scripted_rational_policy(down) != action_index(0)


def test_controller_performance_floor():
    returns = P.unconfounded_rollout(P.scripted_rational_policy, np.random.default_rng(8), 20)
    random_returns = P.unconfounded_rollout(P.uniform_random_policy(np.random.default_rng(9)),
                                            np.random.default_rng(8), 20)
    assert returns.mean() >= -400
    assert random_returns.mean() < returns.mean()


def test_generate_dataset_shapes():
    cfg = EMO.replace(n_transitions=1000)
    ds = P.generate_offline_dataset("EmotionalPendulum", cfg)
    assert len(ds) == 1000
    assert len(P.episode_starts(ds)) == 5
    assert ds.m is not None and ds.u is None
    star = ExperimentConfig(scenario="EmotionalPendulumStar", p_fail=0.0, n_transitions=400)
    ds = P.generate_offline_dataset("EmotionalPendulumStar", star)
    assert ds.u is not None and ds.m is None
    with pytest.raises(ValueError):
        P.generate_offline_dataset("WindyPendulum", cfg)
    with pytest.raises(ValueError):
        P.generate_offline_dataset("EmotionalPendulumStar", star.replace(p_fail=0.2))


def test_generated_mismatch_rate_and_determinism():
    ds = P.generate_offline_dataset("EmotionalPendulum", EMO)
    rate = np.mean(ds.m != ds.a)
    sigma = np.sqrt(0.16 * 0.84 / len(ds))
    assert abs(rate - 0.16) < 3 * sigma
    again = P.generate_offline_dataset("EmotionalPendulum", EMO)
    assert again == ds
    # a step's next observation is the following row's observation
    assert np.array_equal(ds.s_next[:199], ds.s[1:200])


def test_epsilon_soft_rational_changes_data_only_when_enabled():
    base = P.generate_offline_dataset("EmotionalPendulum", EMO.replace(n_transitions=2000))
    soft = P.generate_offline_dataset("EmotionalPendulum", EMO.replace(n_transitions=2000, rational_epsilon=0.3))
    assert base.generator_config_digest != soft.generator_config_digest
    agree = np.mean(soft.a == P.scripted_rational_policy(soft.s))
    assert 0.6 < agree < 0.9


def test_online_rollout_deterministic():
    f = lambda: P.online_rollout("WindyPendulum", P.scripted_rational_policy,
                                 ExperimentConfig(scenario="WindyPendulum", p_fail=0.1, odds=2.5),
                                 np.random.default_rng(11), n_episodes=3)
    assert f() == f()
    with pytest.raises(ValueError):
        P.online_rollout("WindyPendulum", P.scripted_rational_policy, EMO, np.random.default_rng(0), 0)
