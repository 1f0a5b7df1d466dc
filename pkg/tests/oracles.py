"""Independent closed-form oracles used by the tests.

These re-derive conditionals from the generative description of the
tasks rather than from the library's estimators.
"""

import numpy as np
from scipy.stats import norm

from deconfounding_rl import pendulum as P
from deconfounding_rl.cmdp import action_index


def emotional_reward_ratio(ds, cfg, rational=P.scripted_rational_policy):
    """Exact reward-only ratio for an EmotionalPendulum dataset.

    P(r | m, a, s) = sum_w1 P(w1 | a, s) sum_w2 P(w2 | w1) N(r; base(s, m) + 10 w2, 1)
    """
    s = ds.s
    n = len(ds)
    theta, v = P.obs_angle(s), s[:, 2]
    q = 1.0 / (1.0 + cfg.odds)
    p = cfg.irrational_prob
    a_bar = rational(s)
    t_irr = np.where(np.abs(v) > cfg.v_threshold, -2.0 * np.sign(v), 2.0 * np.sign(v))
    valid = (v != 0) & (t_irr != 0)
    a_irr = action_index(t_irr.astype(np.int64))

    # P(a | s, w1) for the five actions
    eps = cfg.rational_epsilon
    pa_w0 = np.full((n, 5), eps / 5)
    pa_w0[np.arange(n), a_bar] += 1.0 - eps
    pa_w1 = np.where(valid[:, None], 1 - p, 1.0) * pa_w0
    pa_w1[np.arange(n), a_irr] += np.where(valid, p, 0.0)
    p_a = (1 - q) * pa_w0 + q * pa_w1
    post_w1 = q * pa_w1 / np.where(p_a > 0, p_a, 1.0)  # P(w1 = 1 | a, s)

    base = P.base_reward(P.EnvState(theta, v), ds.m.astype(np.float64) - 2.0)
    r = ds.r
    lik_bonus = norm.pdf(r - base - P.ENCOURAGEMENT_MEAN)
    lik_plain = norm.pdf(r - base)
    p_bonus = post_w1 * P.W2_GIVEN_W1 + (1 - post_w1) * (1 - P.W2_GIVEN_W1)  # [n, a']
    dens = p_bonus * lik_bonus[:, None] + (1 - p_bonus) * lik_plain[:, None]
    numer = (dens * p_a).sum(1)
    return numer / dens[np.arange(n), ds.a]


def flip_cmdp():
    """Two-state front-door instance where confounding reverses the best action.

    w = 1 raises the reward and pushes the behavior policy to a = 1, while
    executing m = 1 lowers the reward. Offline, a = 1 looks better; under
    do(a), a = 0 is better in both states.
    """
    from deconfounding_rl.tabular import TabularCMDP

    p_w = np.full((2, 2), 0.5)
    pi_b = np.empty((2, 2, 2))
    pi_b[:, 0] = [0.9, 0.1]
    pi_b[:, 1] = [0.1, 0.9]
    p_m = np.tile([[0.9, 0.1], [0.1, 0.9]], (2, 1, 1))
    p_out = np.empty((2, 2, 2, 2, 2))
    for s in range(2):
        for w in range(2):
            for m in range(2):
                hi = 0.2 + 0.6 * w - 0.2 * m + 0.05 * s
                p_out[s, w, m] = np.outer([0.5, 0.5], [1 - hi, hi])
    return TabularCMDP(mu=np.full(2, 0.5), p_w=p_w, pi_b=pi_b, p_out=p_out, p_m=p_m)


def one_step_value(cmdp, policy):
    """Exact online value of a deterministic policy at gamma = 0."""
    mean_r = cmdp.interventional().sum(2) @ cmdp.rewards  # [s, a]
    return float(sum(cmdp.mu[s] * mean_r[s, policy[s]] for s in range(cmdp.n_states)))
