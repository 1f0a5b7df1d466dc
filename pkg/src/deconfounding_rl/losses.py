"""Per-sample losses split into an outcome part ``f`` and a state-action
part ``h``.

Every loss returns :class:`LossTerms` carrying ``f`` and ``h`` together with
their derivatives with respect to the online network's outputs at the
batch states. The training objective ``mean(d * f + h)`` then
backpropagates through a single network pass. Bootstrap targets are
constants (no gradient flows into them).
"""

from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np

from .nets import MLP, PolicyHead, QApproximator, log_softmax, softmax


class Batch(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray


class LossTerms(NamedTuple):
    f: np.ndarray
    h: np.ndarray
    df: np.ndarray  # d f_i / d out_i, shape (B, n_out)
    dh: np.ndarray


def batch_from(dataset, idx, reward_scale: float = 1.0) -> Batch:
    return Batch(dataset.s[idx], dataset.a[idx], dataset.r[idx] * reward_scale,
                 dataset.s_next[idx], dataset.done[idx])


def objective(terms: LossTerms, weights: Optional[np.ndarray] = None) -> float:
    w = 1.0 if weights is None else weights
    return float(np.mean(w * terms.f + terms.h))


def output_gradient(terms: LossTerms, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """d objective / d outputs; the weight multiplies only the f part."""
    w = np.ones(len(terms.f)) if weights is None else np.asarray(weights, dtype=np.float64)
    return (w[:, None] * terms.df + terms.dh) / len(terms.f)


def _td_terms(q_sa_all: np.ndarray, a: np.ndarray, y: np.ndarray) -> LossTerms:
    rows = np.arange(len(a))
    diff = y - q_sa_all[rows, a]
    df = np.zeros_like(q_sa_all)
    df[rows, a] = -2.0 * diff
    zero = np.zeros(len(a))
    return LossTerms(diff**2, zero, df, np.zeros_like(q_sa_all))


def _bootstrap(batch: Batch, gamma: float, next_value: np.ndarray) -> np.ndarray:
    return batch.r + gamma * np.where(batch.done, 0.0, next_value)


def dqn_target(target_q: np.ndarray, batch: Batch, gamma: float) -> np.ndarray:
    return _bootstrap(batch, gamma, target_q.max(1))


def loss_dqn(q: QApproximator, batch: Batch, gamma: float, q_s: Optional[np.ndarray] = None,
             target_next: Optional[np.ndarray] = None) -> LossTerms:
    """f = (r + gamma max_a' Q_target(s', a') - Q(s, a))^2, h = 0."""
    q_s = q(batch.s) if q_s is None else q_s
    target_next = q.target(batch.s_next) if target_next is None else target_next
    return _td_terms(q_s, batch.a, dqn_target(target_next, batch, gamma))


def loss_ddqn(q: QApproximator, batch: Batch, gamma: float, q_s: Optional[np.ndarray] = None,
              target_next: Optional[np.ndarray] = None, online_next: Optional[np.ndarray] = None) -> LossTerms:
    """Double DQN: the online network picks a', the target network scores it."""
    q_s = q(batch.s) if q_s is None else q_s
    target_next = q.target(batch.s_next) if target_next is None else target_next
    online_next = q(batch.s_next) if online_next is None else online_next
    a_star = online_next.argmax(1)
    y = _bootstrap(batch, gamma, target_next[np.arange(len(a_star)), a_star])
    return _td_terms(q_s, batch.a, y)


def soft_value(q_values: np.ndarray, probs: np.ndarray, alpha: float) -> np.ndarray:
    """V(s) = pi(s)^T [Q(s) - alpha log pi(s)]."""
    logp = np.log(np.maximum(probs, 1e-300))
    return (probs * (q_values - alpha * logp)).sum(-1)


def loss_sac_critic(q: QApproximator, policy: PolicyHead, batch: Batch, gamma: float, alpha: float,
                    q_s: Optional[np.ndarray] = None) -> LossTerms:
    """f = (r + gamma V(s') - Q(s, a))^2 with V from target Q and current pi."""
    q_s = q(batch.s) if q_s is None else q_s
    v_next = soft_value(q.target(batch.s_next), policy.probs(batch.s_next), alpha)
    return _td_terms(q_s, batch.a, _bootstrap(batch, gamma, v_next))


def loss_sac_actor(policy: PolicyHead, q_values: np.ndarray, s: np.ndarray, alpha: float,
                   logits: Optional[np.ndarray] = None) -> LossTerms:
    """f = 0, h = -V(s); gradients are with respect to the policy logits."""
    logits = policy(s) if logits is None else logits
    logp = log_softmax(logits)
    p = np.exp(logp)
    adv = q_values - alpha * logp
    v = (p * adv).sum(1)
    dh = -p * (adv - v[:, None])
    zero = np.zeros(len(v))
    return LossTerms(zero, -v, np.zeros_like(logits), dh)


def loss_sac_discrete(q: QApproximator, policy: PolicyHead, batch: Batch, gamma: float, alpha: float):
    """Critic and actor terms for discrete SAC, returned as a pair."""
    critic = loss_sac_critic(q, policy, batch, gamma, alpha)
    actor = loss_sac_actor(policy, q(batch.s), batch.s, alpha)
    return critic, actor


def loss_cql(q: QApproximator, batch: Batch, gamma: float, cql_weight: float,
             q_s: Optional[np.ndarray] = None, target_next: Optional[np.ndarray] = None) -> LossTerms:
    """DQN Bellman term in f; conservative penalty
    ``cql_weight * (logsumexp Q(s, .) - Q(s, a))`` in h."""
    q_s = q(batch.s) if q_s is None else q_s
    td = loss_dqn(q, batch, gamma, q_s=q_s, target_next=target_next)
    rows = np.arange(len(batch.a))
    mx = q_s.max(1, keepdims=True)
    lse = (mx + np.log(np.exp(q_s - mx).sum(1, keepdims=True)))[:, 0]
    h = cql_weight * (lse - q_s[rows, batch.a])
    dh = cql_weight * softmax(q_s)
    dh[rows, batch.a] -= cql_weight
    return LossTerms(td.f, h, td.df, dh)


def loss_bc(policy: PolicyHead, s: np.ndarray, a: np.ndarray, logits: Optional[np.ndarray] = None) -> LossTerms:
    """Negative log-likelihood of the dataset action (all in h)."""
    logits = policy(s) if logits is None else logits
    logp = log_softmax(logits)
    rows = np.arange(len(a))
    dh = np.exp(logp)
    dh[rows, a] -= 1.0
    zero = np.zeros(len(a))
    return LossTerms(zero, -logp[rows, a], np.zeros_like(logits), dh)


def objective_and_grad(net: MLP, x: np.ndarray, terms_fn, weights=None):
    """Evaluate ``terms_fn(outputs)`` and backprop the weighted objective."""
    out, cache = net.forward(x)
    terms = terms_fn(out)
    grad = net.backward(cache, output_gradient(terms, weights))
    return objective(terms, weights), grad, terms
