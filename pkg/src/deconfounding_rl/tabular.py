"""Finite confounded MDPs with explicit probability tables.

Used as ground truth: every offline or interventional conditional can be
computed by direct summation, so estimated ratios can be checked against
exact ones.

Table shapes (S states, W confounder values, A actions = intermediate
actions, R reward values):

    mu      (S,)              sampling distribution of s
    p_w     (S, W)            P2(w | s)
    pi_b    (S, W, A)         pi_b(a | s, w)
    p_m     (S, A, A)         P3(m | s, a); ``None`` for the backdoor form
    p_out   (S, W, A, S, R)   P1(s', r | s, w, m) (or ``| s, w, a`` when
                              ``p_m`` is None)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .cmdp import OfflineDataset


class UnnormalizedTableError(ValueError):
    pass


@dataclass(frozen=True)
class TabularCMDP:
    mu: np.ndarray
    p_w: np.ndarray
    pi_b: np.ndarray
    p_out: np.ndarray
    p_m: Optional[np.ndarray] = None
    rewards: Optional[np.ndarray] = None

    def __post_init__(self):
        for name, axis in (("mu", -1), ("p_w", -1), ("pi_b", -1), ("p_m", -1), ("p_out", (-2, -1))):
            table = getattr(self, name)
            if table is None:
                continue
            table = np.asarray(table, dtype=np.float64)
            object.__setattr__(self, name, table)
            if np.any(table < 0) or not np.allclose(table.sum(axis=axis), 1.0, atol=1e-12):
                raise UnnormalizedTableError(f"table {name} is not a normalized distribution")
        if self.rewards is None:
            object.__setattr__(self, "rewards", np.arange(self.p_out.shape[-1], dtype=np.float64))

    @property
    def n_states(self) -> int:
        return len(self.mu)

    @property
    def n_actions(self) -> int:
        return self.pi_b.shape[-1]

    @property
    def frontdoor(self) -> bool:
        return self.p_m is not None

    # -- offline conditionals -------------------------------------------------

    def policy_marginal(self) -> np.ndarray:
        """P(a | s), shape (S, A)."""
        return np.einsum("sw,swa->sa", self.p_w, self.pi_b)

    def w_given_sa(self) -> np.ndarray:
        """Offline posterior P(w | s, a), shape (S, A, W)."""
        joint = np.einsum("sw,swa->saw", self.p_w, self.pi_b)
        return joint / joint.sum(-1, keepdims=True)

    def outcome_given_mas(self) -> np.ndarray:
        """Offline P(s', r | m, a, s), shape (S, A_m, A_a, S', R)."""
        if not self.frontdoor:
            raise ValueError("no intermediate action in the backdoor form")
        return np.einsum("saw,swmtr->smatr", self.w_given_sa(), self.p_out)

    def interventional(self) -> np.ndarray:
        """Online P(s', r | s, do(a)), shape (S, A, S', R)."""
        if self.frontdoor:
            return np.einsum("sam,sw,swmtr->satr", self.p_m, self.p_w, self.p_out)
        return np.einsum("sw,swatr->satr", self.p_w, self.p_out)

    def offline_outcome(self) -> np.ndarray:
        """Offline P(s', r | s, a), shape (S, A, S', R)."""
        post = self.w_given_sa()
        if self.frontdoor:
            return np.einsum("sam,saw,swmtr->satr", self.p_m, post, self.p_out)
        return np.einsum("saw,swatr->satr", post, self.p_out)

    # -- sampling -------------------------------------------------------------

    def sample(self, n: int, rng: np.random.Generator, seed: int = 0) -> OfflineDataset:
        """Draw ``n`` i.i.d. offline transitions (s ~ mu)."""
        s = _draw(self.mu[None, :].repeat(n, 0), rng)
        w = _draw(self.p_w[s], rng)
        a = _draw(self.pi_b[s, w], rng)
        if self.frontdoor:
            m = _draw(self.p_m[s, a], rng)
            out = self.p_out[s, w, m]
        else:
            m = None
            out = self.p_out[s, w, a]
        flat = _draw(out.reshape(n, -1), rng)
        s2, r_idx = np.divmod(flat, self.p_out.shape[-1])
        z = np.zeros(n)
        return OfflineDataset(
            s=np.stack([s, z, z], 1),
            a=a,
            m=m,
            u=None if self.frontdoor else w,
            s_next=np.stack([s2, z, z], 1),
            r=self.rewards[r_idx],
            done=np.zeros(n, dtype=bool),
            scenario="Tabular",
            seed=seed,
        )

    def sample_interventional(self, s: int, a: int, n: int, rng: np.random.Generator):
        """Draw ``(s', r)`` codes from the online dynamics at fixed (s, a)."""
        p = self.interventional()[s, a].ravel()
        flat = rng.choice(len(p), size=n, p=p)
        s2, r_idx = np.divmod(flat, self.p_out.shape[-1])
        return s2, self.rewards[r_idx]

    def reward_index(self, r) -> np.ndarray:
        return np.searchsorted(self.rewards, np.asarray(r))


def _draw(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One categorical draw per row of ``p``."""
    cdf = np.cumsum(p, axis=-1)
    u = rng.random(len(p))[:, None] * cdf[:, -1:]
    return np.minimum((u >= cdf).sum(-1), p.shape[-1] - 1)


def tabular_codes(dataset: OfflineDataset, cmdp: TabularCMDP):
    """Integer codes ``(s, a, m, u, s', r_index)`` of a tabular dataset."""
    s = dataset.s[:, 0].astype(np.int64)
    s2 = dataset.s_next[:, 0].astype(np.int64)
    return s, dataset.a, dataset.m, dataset.u, s2, cmdp.reward_index(dataset.r)


def random_cmdp(
    rng: np.random.Generator,
    n_states: int = 2,
    n_actions: int = 2,
    n_w: int = 2,
    n_rewards: int = 2,
    frontdoor: bool = True,
    confounded: bool = True,
    strength: float = 0.8,
    floor: float = 0.05,
) -> TabularCMDP:
    """Random instance whose behavior policy leans on ``w`` with the given
    strength; every table entry is at least ``floor`` before normalization
    so that positivity holds."""

    def dist(*shape):
        p = rng.random(shape) + floor
        return p / p.sum(-1, keepdims=True)

    pi = dist(n_states, n_w, n_actions)
    if confounded:
        # push each w value toward a different preferred action
        pref = np.zeros((n_states, n_w, n_actions))
        for w in range(n_w):
            pref[:, w, w % n_actions] = 1.0
        pi = (1 - strength) * pi + strength * pref
        pi = (pi + floor * 0.1) / (pi + floor * 0.1).sum(-1, keepdims=True)
    else:
        pi = np.repeat(pi[:, :1], n_w, axis=1)
    p_out = rng.random((n_states, n_w, n_actions, n_states * n_rewards)) + floor
    # make the outcome depend strongly on w so confounding matters
    p_out[:, 1, :, -1] += 2.0
    p_out /= p_out.sum(-1, keepdims=True)
    return TabularCMDP(
        mu=dist(n_states),
        p_w=dist(n_states, n_w),
        pi_b=pi,
        p_out=p_out.reshape(n_states, n_w, n_actions, n_states, n_rewards),
        p_m=dist(n_states, n_actions, n_actions) if frontdoor else None,
    )


def example_frontdoor_cmdp() -> TabularCMDP:
    """Hand-built 2-state / 2-action / binary-w instance.

    The behavior policy picks action 1 with probability 0.9 when w = 1 and
    0.1 when w = 0; w raises the chance of the high reward.
    """
    p_w = np.array([[0.6, 0.4], [0.3, 0.7]])
    pi_b = np.empty((2, 2, 2))
    pi_b[:, 1] = [0.1, 0.9]
    pi_b[:, 0] = [0.9, 0.1]
    p_m = np.array([[[0.8, 0.2], [0.25, 0.75]], [[0.7, 0.3], [0.2, 0.8]]])
    # p_out[s, w, m, s', r]
    p_out = np.empty((2, 2, 2, 2, 2))
    for s in range(2):
        for m in range(2):
            stay = 0.7 if m == s else 0.35
            for w in range(2):
                hi = 0.75 if w == 1 else 0.2
                hi = min(hi + 0.1 * m, 0.95)
                p_s2 = np.array([stay, 1 - stay]) if s == 0 else np.array([1 - stay, stay])
                p_r = np.array([1 - hi, hi])
                p_out[s, w, m] = np.outer(p_s2, p_r)
    return TabularCMDP(mu=np.array([0.5, 0.5]), p_w=p_w, pi_b=pi_b, p_out=p_out, p_m=p_m)


def example_backdoor_cmdp() -> TabularCMDP:
    """Backdoor counterpart of :func:`example_frontdoor_cmdp` (u = w)."""
    base = example_frontdoor_cmdp()
    # outcome depends on (s, w, a) directly
    return TabularCMDP(mu=base.mu, p_w=base.p_w, pi_b=base.pi_b, p_out=base.p_out.copy())


def unconfounded_version(cmdp: TabularCMDP) -> TabularCMDP:
    """Same instance with a behavior policy that ignores w."""
    pi = np.einsum("sw,swa->sa", cmdp.p_w, cmdp.pi_b)
    return TabularCMDP(mu=cmdp.mu, p_w=cmdp.p_w, pi_b=np.repeat(pi[:, None], cmdp.p_w.shape[1], 1),
                       p_out=cmdp.p_out, p_m=cmdp.p_m, rewards=cmdp.rewards)
