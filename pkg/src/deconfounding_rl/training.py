"""Offline training loops: DQN, DDQN, discrete SAC, CQL and behavior cloning.

``mode`` selects how deconfounding weights enter:

* ``none``      uniform minibatches, objective mean(f + h)
* ``reweight``  uniform minibatches, objective mean(d * f + h)
* ``resample``  minibatches drawn with probability proportional to d,
                objective mean(f + h)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import losses as L
from .cmdp import OfflineDataset, minibatch_iter
from .nets import DEFAULT_SIZES, PolicyHead, QApproximator, make_optimizer
from .weights import WeightVector, resample_distribution

ALGOS = ("dqn", "ddqn", "sac", "cql", "bc")


@dataclass
class TrainConfig:
    gamma: float = 0.99
    learning_rate: float = 3e-4
    batch_size: int = 256
    target_sync_interval: int = 1000
    alpha_ent: float = 0.2
    cql_weight: float = 1.0
    total_steps: int = 30_000
    mode: str = "none"
    reward_scale: float = 1.0
    optimizer: str = "adam"
    sizes: Sequence[int] = DEFAULT_SIZES

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if self.mode not in ("none", "reweight", "resample"):
            raise ValueError(f"unknown mode {self.mode!r}")
        for name in ("learning_rate", "batch_size", "target_sync_interval"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")


@dataclass
class TrainResult:
    algo: str
    q: Optional[QApproximator] = None
    policy: Optional[PolicyHead] = None
    loss_history: list = field(default_factory=list)

    def act(self, s) -> np.ndarray:
        """Greedy action indices for a batch of observations."""
        if self.algo in ("sac", "bc"):
            return self.policy.greedy(s)
        return self.q.greedy(s)


Callback = Callable[[int, TrainResult], None]


def _seeds(seed: int):
    init, sample = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init), int(sample.generate_state(1)[0])


def _sampler(dataset: OfflineDataset, cfg: TrainConfig, weights: Optional[WeightVector], seed: int):
    if (weights is None) != (cfg.mode == "none"):
        raise ValueError("weights must be given exactly when mode != 'none'")
    if weights is not None and len(weights) != len(dataset):
        raise ValueError(f"{len(weights)} weights for {len(dataset)} transitions")
    dist = resample_distribution(weights) if cfg.mode == "resample" else None
    return minibatch_iter(len(dataset), cfg.batch_size, dist, seed)


def _check(value: float, step: int, algo: str) -> None:
    if not np.isfinite(value):
        raise FloatingPointError(f"{algo}: non-finite loss {value} at step {step}")


def train(
    dataset: OfflineDataset,
    weights: Optional[WeightVector],
    algo: str,
    cfg: TrainConfig,
    seed: int = 0,
    callback: Optional[Callback] = None,
    eval_every: Optional[int] = None,
) -> TrainResult:
    """Train ``algo`` on ``dataset`` for ``cfg.total_steps`` gradient steps.

    ``callback(step, result)`` runs at step 0 and then every ``eval_every``
    steps. Runs are fully determined by ``seed``.
    """
    if algo == "bc":
        return behavior_cloning(dataset, cfg, seed, callback, eval_every)
    if algo not in ALGOS:
        raise ValueError(f"unknown algorithm {algo!r}")
    rng, sample_seed = _seeds(seed)
    q = QApproximator(cfg.sizes, rng)
    policy = PolicyHead(cfg.sizes, rng) if algo == "sac" else None
    q_opt = make_optimizer(cfg.optimizer, q.n_params, cfg.learning_rate)
    pi_opt = make_optimizer(cfg.optimizer, policy.n_params, cfg.learning_rate) if policy else None
    batches = _sampler(dataset, cfg, weights, sample_seed)
    reweight = cfg.mode == "reweight"
    result = TrainResult(algo, q, policy)

    for step in range(cfg.total_steps + 1):
        if callback is not None and eval_every and step % eval_every == 0:
            callback(step, result)
        if step == cfg.total_steps:
            break
        idx = next(batches)
        batch = L.batch_from(dataset, idx, cfg.reward_scale)
        w = weights.clipped[idx] if reweight else None

        if algo == "sac":
            critic_fn = lambda out: L.loss_sac_critic(q, policy, batch, cfg.gamma, cfg.alpha_ent, q_s=out)
            value, grad, _ = L.objective_and_grad(q, batch.s, critic_fn, w)
            _check(value, step, algo)
            q_opt.step(q.params, grad)
            q_now = q(batch.s)
            actor_fn = lambda out: L.loss_sac_actor(policy, q_now, batch.s, cfg.alpha_ent, logits=out)
            actor_value, pgrad, _ = L.objective_and_grad(policy, batch.s, actor_fn, w)
            _check(actor_value, step, algo)
            pi_opt.step(policy.params, pgrad)
        else:
            target_next = q.target(batch.s_next)
            if algo == "dqn":
                fn = lambda out: L.loss_dqn(q, batch, cfg.gamma, q_s=out, target_next=target_next)
            elif algo == "ddqn":
                online_next = q(batch.s_next)
                fn = lambda out: L.loss_ddqn(q, batch, cfg.gamma, q_s=out, target_next=target_next,
                                             online_next=online_next)
            else:
                fn = lambda out: L.loss_cql(q, batch, cfg.gamma, cfg.cql_weight, q_s=out,
                                            target_next=target_next)
            value, grad, _ = L.objective_and_grad(q, batch.s, fn, w)
            _check(value, step, algo)
            q_opt.step(q.params, grad)
        result.loss_history.append(value)
        if (step + 1) % cfg.target_sync_interval == 0:
            q.sync_target()
    return result


def behavior_cloning(
    dataset: OfflineDataset,
    cfg: TrainConfig,
    seed: int = 0,
    callback: Optional[Callback] = None,
    eval_every: Optional[int] = None,
) -> TrainResult:
    """Maximum-likelihood imitation of the dataset actions."""
    rng, sample_seed = _seeds(seed)
    policy = PolicyHead(cfg.sizes, rng)
    opt = make_optimizer(cfg.optimizer, policy.n_params, cfg.learning_rate)
    batches = minibatch_iter(len(dataset), cfg.batch_size, None, sample_seed)
    result = TrainResult("bc", policy=policy)
    for step in range(cfg.total_steps + 1):
        if callback is not None and eval_every and step % eval_every == 0:
            callback(step, result)
        if step == cfg.total_steps:
            break
        idx = next(batches)
        s, a = dataset.s[idx], dataset.a[idx]
        value, grad, _ = L.objective_and_grad(policy, s, lambda out: L.loss_bc(policy, s, a, logits=out))
        _check(value, step, "bc")
        opt.step(policy.params, grad)
        result.loss_history.append(value)
    return result
