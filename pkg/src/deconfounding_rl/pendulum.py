"""Confounded pendulum tasks: physics, confounders, behavior, data generation.

All per-step functions are vectorized: states, observations and confounder
draws may carry a leading batch axis so that many episodes advance in
lockstep. ``theta = 0`` is the upright position.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional

import numpy as np

from .cmdp import (
    ACTIONS,
    N_ACTIONS,
    ExperimentConfig,
    OfflineDataset,
    action_index,
    action_torque,
    is_star,
)

Policy = Callable[[np.ndarray], np.ndarray]

ENCOURAGEMENT_MEAN = 10.0
W2_GIVEN_W1 = 0.99  # Pr(w2 = True | w1 = True) = Pr(w2 = False | w1 = False)
SENSOR_STD = 0.1
SENSOR_RANGE = (0.5, 1.5)
WIND_FORCE = np.array([-5.0, 0.0, 5.0])


@dataclass(frozen=True)
class PhysicsParams:
    g: float = 10.0
    l_rod: float = 1.0
    mass: float = 1.0
    dt: float = 0.05
    max_speed: float = 8.0
    episode_len: int = 200


class EnvState(NamedTuple):
    theta: np.ndarray
    v: np.ndarray


class ConfounderDraw(NamedTuple):
    """``w1``: fear / negative emotion. ``w2``: expression flag (Emotional)
    or wind code 0/1/2 with 1 meaning calm (Windy)."""

    w1: np.ndarray
    w2: np.ndarray


@dataclass(frozen=True)
class BehaviorConfig:
    odds: float = 4.0
    irrational_prob: float = 0.7
    v_threshold: float = 1.0
    p_fail: float = 0.2

    def __post_init__(self):
        if not self.odds > 0:
            raise ValueError("odds must be > 0")
        for name in ("irrational_prob", "p_fail"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    @classmethod
    def from_experiment(cls, cfg: ExperimentConfig) -> "BehaviorConfig":
        return cls(
            odds=cfg.odds,
            irrational_prob=cfg.irrational_prob,
            v_threshold=cfg.v_threshold,
            p_fail=0.0 if is_star(cfg.scenario) else cfg.p_fail,
        )


def wrap_angle(theta):
    """Wrap to (-pi, pi]."""
    out = np.pi - np.mod(np.pi - np.asarray(theta, dtype=np.float64), 2 * np.pi)
    return out if np.ndim(out) else float(out)


def step_physics(state: EnvState, torque, params: PhysicsParams = PhysicsParams()) -> EnvState:
    """One explicit-Euler step of the Gym pendulum; speed is clipped first."""
    theta = np.asarray(state.theta, dtype=np.float64)
    v = np.asarray(state.v, dtype=np.float64)
    g, l, m, dt = params.g, params.l_rod, params.mass, params.dt
    acc = 3.0 * g / (2.0 * l) * np.sin(theta) + 3.0 / (m * l**2) * np.asarray(torque, dtype=np.float64)
    v_new = np.clip(v + acc * dt, -params.max_speed, params.max_speed)
    theta_new = wrap_angle(theta + v_new * dt)
    return EnvState(theta_new, v_new)


def _sensor_length(rng: np.random.Generator, size) -> np.ndarray:
    lo, hi = SENSOR_RANGE
    out = rng.normal(1.0, SENSOR_STD, size)
    bad = (out <= lo) | (out >= hi)
    while np.any(bad):
        out[bad] = rng.normal(1.0, SENSOR_STD, int(bad.sum()))
        bad = (out <= lo) | (out >= hi)
    return out


def observe(state: EnvState, rng: np.random.Generator) -> np.ndarray:
    """Noisy Cartesian sensor reading ``(x, y, v)``; the radius is a
    normal(1, 0.1^2) draw truncated to (0.5, 1.5)."""
    theta = np.asarray(state.theta, dtype=np.float64)
    v = np.asarray(state.v, dtype=np.float64)
    length = _sensor_length(rng, theta.shape)
    return np.stack([np.cos(theta) * length, np.sin(theta) * length, v * np.ones_like(theta)], axis=-1)


def obs_angle(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    return np.arctan2(s[..., 1], s[..., 0])


def sample_confounders(
    scenario: str, s: np.ndarray, config: BehaviorConfig, rng: np.random.Generator
) -> ConfounderDraw:
    """Draw (w1, w2) for every row of ``s``.

    Confounders are independent of the state in all four tasks; ``s`` only
    fixes the batch shape.
    """
    size = np.asarray(s).shape[:-1]
    if scenario.startswith("Emotional"):
        w1 = rng.random(size) < 1.0 / (1.0 + config.odds)
        flip = rng.random(size) >= W2_GIVEN_W1
        w2 = (w1 ^ flip).astype(np.int64)
        return ConfounderDraw(w1, w2)
    if scenario.startswith("Windy"):
        calm = config.odds / (1.0 + config.odds)
        p = np.array([(1 - calm) / 2, calm, (1 - calm) / 2])
        w2 = np.searchsorted(np.cumsum(p), rng.random(size), side="right").clip(0, 2)
        return ConfounderDraw(w2 != 1, w2.astype(np.int64))
    raise ValueError(f"no confounder model for scenario {scenario!r}")


def wind_force(w2):
    """Wind force for wind code(s): 0 -> -5, 1 -> 0, 2 -> +5."""
    w2 = np.asarray(w2)
    if np.any((w2 < 0) | (w2 > 2)) or not np.issubdtype(w2.dtype, np.integer):
        raise ValueError(f"invalid wind code {w2!r}")
    out = WIND_FORCE[w2]
    return out if np.ndim(out) else float(out)


def irrational_torques(s: np.ndarray, w2: Optional[np.ndarray] = None):
    """Torques of the slow-down, speed-up and (if ``w2`` given) anti-wind
    actions. Zero means the sign argument vanished."""
    v = np.asarray(s)[..., 2]
    slow = -2.0 * np.sign(v)
    fast = 2.0 * np.sign(v)
    if w2 is None:
        return slow, fast, None
    anti = -2.0 * np.sign(WIND_FORCE[np.asarray(w2)] * np.cos(obs_angle(s)))
    return slow, fast, anti


def behavior_action(
    scenario: str,
    s: np.ndarray,
    w: ConfounderDraw,
    rational: Policy,
    config: BehaviorConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Confounded human policy pi_b(a | s, w); returns action indices.

    ``s`` is the observed state (the speed is observed without noise, so
    the speed thresholds match those on the true state).
    """
    s = np.asarray(s, dtype=np.float64)
    a_bar = np.asarray(rational(s), dtype=np.int64)
    v = s[..., 2]
    roll = rng.random(v.shape)
    p = config.irrational_prob
    w1 = np.asarray(w.w1, dtype=bool)
    if scenario.startswith("Emotional"):
        slow, fast, _ = irrational_torques(s)
        torque = np.where(np.abs(v) > config.v_threshold, slow, fast)
        use = w1 & (v != 0) & (roll < p)
    elif scenario.startswith("Windy"):
        slow, _, anti = irrational_torques(s, w.w2)
        torque = np.where(roll < p / 2, anti, slow)
        use = w1 & (roll < p)
    else:
        raise ValueError(f"no behavior model for scenario {scenario!r}")
    use &= torque != 0
    return np.where(use, action_index(torque.astype(np.int64)), a_bar)


def intermediate_action(a, p_fail: float, rng: np.random.Generator) -> np.ndarray:
    """Executed action m: with probability ``p_fail`` a uniform draw over all
    five actions, otherwise ``a``."""
    a = np.asarray(a, dtype=np.int64)
    fail = rng.random(a.shape) < p_fail
    random_action = rng.integers(0, N_ACTIONS, a.shape)
    return np.where(fail, random_action, a)


def base_reward(state: EnvState, torque) -> np.ndarray:
    theta = wrap_angle(np.asarray(state.theta, dtype=np.float64))
    v = np.asarray(state.v, dtype=np.float64)
    torque = np.asarray(torque, dtype=np.float64)
    return -(theta**2 + 0.1 * v**2 + 0.001 * torque**2)


def encouraged(scenario: str, w: ConfounderDraw) -> np.ndarray:
    if scenario.startswith("Emotional"):
        return np.asarray(w.w2) == 1
    if scenario.startswith("Windy"):
        return np.asarray(w.w2) != 1
    raise ValueError(scenario)


def reward(
    scenario: str, state: EnvState, executed_torque, w: ConfounderDraw, rng: np.random.Generator
) -> np.ndarray:
    """Gym pendulum cost plus a N(10, 1) bonus when encouragement is on,
    N(0, 1) otherwise."""
    r_o = base_reward(state, executed_torque)
    bonus = np.where(encouraged(scenario, w), ENCOURAGEMENT_MEAN, 0.0)
    return r_o + bonus + rng.standard_normal(np.shape(r_o))


# Energy-shaping swing-up plus PD balance. Gains tuned for the default
# physics; see tests/test_pendulum.py for the performance floor.
SWING_GAIN = 2.0
BALANCE_KP = 8.0
BALANCE_KD = 1.5
BALANCE_COS = 0.8


def pendulum_energy(theta, v, params: PhysicsParams = PhysicsParams()):
    """Mechanical energy relative to upright rest (0 at the top, -m g l at
    the bottom)."""
    inertia = params.mass * params.l_rod**2 / 3.0
    return 0.5 * inertia * v**2 + 0.5 * params.mass * params.g * params.l_rod * (np.cos(theta) - 1.0)


def scripted_rational_policy(s: np.ndarray) -> np.ndarray:
    """Deterministic swing-up/balance controller snapped to {-2, ..., 2}.

    Stand-in for a trained agent. Accepts one observation or a batch and
    returns action indices.
    """
    s = np.asarray(s, dtype=np.float64)
    theta = obs_angle(s)
    v = s[..., 2]
    energy = pendulum_energy(theta, v)
    pump_dir = np.where(v == 0, 1.0, np.sign(v))
    swing = SWING_GAIN * (-energy) * pump_dir
    balance = -(BALANCE_KP * theta + BALANCE_KD * v)
    torque = np.where(np.cos(theta) > BALANCE_COS, balance, swing)
    torque = np.clip(np.rint(torque), -2, 2).astype(np.int64)
    out = action_index(torque)
    return out if np.ndim(out) else int(out)


def epsilon_soft(policy: Policy, epsilon: float, rng: np.random.Generator) -> Policy:
    """With probability ``epsilon`` replace the action by a uniform one.

    A stochastic stand-in for a trained (soft) agent; it also gives the
    offline data some coverage of every action.
    """
    def act(s):
        a = np.asarray(policy(s), dtype=np.int64)
        explore = rng.random(a.shape) < epsilon
        return np.where(explore, rng.integers(0, N_ACTIONS, a.shape), a)

    return act


def reset_states(n: int, rng: np.random.Generator) -> EnvState:
    theta = np.pi - 2 * np.pi * rng.random(n)  # (-pi, pi]
    v = rng.uniform(-1.0, 1.0, n)
    return EnvState(theta, v)


def generate_offline_dataset(
    scenario: str,
    config: ExperimentConfig,
    rational: Optional[Policy] = None,
    rng: Optional[np.random.Generator] = None,
    params: PhysicsParams = PhysicsParams(),
) -> OfflineDataset:
    """Simulate the confounded offline data-generating process.

    Episodes of ``params.episode_len`` steps run in lockstep and are then
    laid out one after the other; the final episode is truncated to give
    exactly ``config.n_transitions`` rows. Time-limit cutoffs are not
    terminal, so ``done`` is always False; episode starts are recoverable
    with :func:`episode_starts`.

    ``rational`` defaults to :func:`scripted_rational_policy`; when
    ``config.rational_epsilon`` > 0 it is made epsilon-soft.
    """
    if scenario != config.scenario:
        raise ValueError(f"config is for {config.scenario}, not {scenario}")
    if scenario == "Tabular":
        raise ValueError("tabular datasets come from deconfounding_rl.tabular")
    if is_star(scenario) and config.p_fail not in (0.0, None):
        raise ValueError(f"{scenario} has no intermediate action; set p_fail=0")
    if rng is None:
        rng = np.random.default_rng(config.data_seed)
    tag = "scripted-rational" if rational is None else "custom-rational"
    rational = scripted_rational_policy if rational is None else rational
    if config.rational_epsilon > 0:
        rational = epsilon_soft(rational, config.rational_epsilon, rng)
    behavior = BehaviorConfig.from_experiment(config)
    n = config.n_transitions
    T = params.episode_len
    n_ep = -(-n // T)

    state = reset_states(n_ep, rng)
    obs = observe(state, rng)
    cols = {k: np.empty((T, n_ep) + shape, dtype) for k, shape, dtype in (
        ("s", (3,), np.float64),
        ("s_next", (3,), np.float64),
        ("a", (), np.int64),
        ("m", (), np.int64),
        ("u", (), np.int64),
        ("r", (), np.float64),
    )}
    for t in range(T):
        w = sample_confounders(scenario, obs, behavior, rng)
        a = behavior_action(scenario, obs, w, rational, behavior, rng)
        m = a if is_star(scenario) else intermediate_action(a, behavior.p_fail, rng)
        torque = action_torque(m).astype(np.float64)
        r = reward(scenario, state, torque, w, rng)
        effective = torque
        if scenario.startswith("Windy"):
            effective = torque - WIND_FORCE[w.w2] * np.cos(state.theta)
        state = step_physics(state, effective, params)
        obs_next = observe(state, rng)
        cols["s"][t], cols["s_next"][t] = obs, obs_next
        cols["a"][t], cols["m"][t], cols["u"][t], cols["r"][t] = a, m, w.w2, r
        obs = obs_next

    def flat(x):
        x = np.swapaxes(x, 0, 1)
        return x.reshape((-1,) + x.shape[2:])[:n]

    star = is_star(scenario)
    return OfflineDataset(
        s=flat(cols["s"]),
        a=flat(cols["a"]),
        m=None if star else flat(cols["m"]),
        u=flat(cols["u"]) if star else None,
        s_next=flat(cols["s_next"]),
        r=flat(cols["r"]),
        done=np.zeros(n, dtype=bool),
        scenario=scenario,
        generator_config_digest=config.digest(DATA_KEYS) + ":" + tag,
        seed=config.data_seed,
    )


DATA_KEYS = ("scenario", "p_fail", "odds", "v_threshold", "irrational_prob", "n_transitions",
             "rational_epsilon", "data_seed")


def episode_starts(dataset: OfflineDataset) -> np.ndarray:
    """Row indices at which a new episode begins (continuity of s' -> s)."""
    jump = np.any(dataset.s_next[:-1] != dataset.s[1:], axis=1)
    return np.concatenate([[0], np.flatnonzero(jump) + 1])


def online_rollout(
    scenario: str,
    policy: Policy,
    config: ExperimentConfig,
    rng: np.random.Generator,
    n_episodes: int = 20,
    params: PhysicsParams = PhysicsParams(),
    return_all: bool = False,
):
    """Mean undiscounted return of ``policy`` acting on the observed state.

    Confounders still drive rewards and wind, and non-Star tasks still
    corrupt the action with ``p_fail``, but the action itself no longer
    depends on ``w``.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    behavior = BehaviorConfig.from_experiment(config)
    state = reset_states(n_episodes, rng)
    obs = observe(state, rng)
    total = np.zeros(n_episodes)
    for _ in range(params.episode_len):
        w = sample_confounders(scenario, obs, behavior, rng)
        a = np.asarray(policy(obs), dtype=np.int64)
        m = a if is_star(scenario) else intermediate_action(a, behavior.p_fail, rng)
        torque = action_torque(m).astype(np.float64)
        total += reward(scenario, state, torque, w, rng)
        effective = torque
        if scenario.startswith("Windy"):
            effective = torque - WIND_FORCE[w.w2] * np.cos(state.theta)
        state = step_physics(state, effective, params)
        obs = observe(state, rng)
    return total if return_all else float(total.mean())


def unconfounded_rollout(
    policy: Policy, rng: np.random.Generator, n_episodes: int = 20, params: PhysicsParams = PhysicsParams()
) -> np.ndarray:
    """Per-episode returns on the plain pendulum (original reward only)."""
    state = reset_states(n_episodes, rng)
    obs = observe(state, rng)
    total = np.zeros(n_episodes)
    for _ in range(params.episode_len):
        torque = action_torque(np.asarray(policy(obs), dtype=np.int64)).astype(np.float64)
        total += base_reward(state, torque)
        state = step_physics(state, torque, params)
        obs = observe(state, rng)
    return total


def uniform_random_policy(rng: np.random.Generator) -> Policy:
    def act(s):
        return rng.integers(0, N_ACTIONS, np.asarray(s).shape[:-1])

    return act


__all__ = [
    "ACTIONS",
    "BehaviorConfig",
    "ConfounderDraw",
    "EnvState",
    "PhysicsParams",
    "behavior_action",
    "generate_offline_dataset",
    "intermediate_action",
    "observe",
    "online_rollout",
    "reward",
    "sample_confounders",
    "scripted_rational_policy",
    "step_physics",
    "wind_force",
]
