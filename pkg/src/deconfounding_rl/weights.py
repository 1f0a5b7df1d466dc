"""Deconfounding ratios, their post-processing, and exact tabular oracles.

Four ratios are supported:

``full``
    sum_a' P(s', r | m, a', s) P(a' | s) / P(s', r | m, a, s)
``reward-only`` / ``next-state-only``
    the same with the outcome reduced to ``r`` or ``s'``
``backdoor``
    P(u | s) / P(u | s, a)
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import density
from .cmdp import N_ACTIONS, OfflineDataset, atomic_write_text
from .density import JitterConfig, LscdeModel, conditional_density
from .tabular import TabularCMDP, tabular_codes

logger = logging.getLogger(__name__)

RATIO_KINDS = ("full", "reward-only", "next-state-only", "backdoor")
DENOMINATOR_FLOOR = 1e-12
DEFAULT_CLIP = (0.1, 10.0)
FLOOR_WARNING_FRACTION = 0.05


class MissingFieldError(ValueError):
    pass


@dataclass(frozen=True)
class WeightVector:
    raw: np.ndarray
    clipped: np.ndarray
    clip_bounds: tuple
    mean_raw: float
    fraction_clipped: float
    ratio_kind: str = ""
    n_floored: int = 0
    quality_warning: bool = False

    def __len__(self) -> int:
        return len(self.raw)


def postprocess_weights(raw, clip_low: float = DEFAULT_CLIP[0], clip_high: float = DEFAULT_CLIP[1],
                        ratio_kind: str = "", n_floored: int = 0) -> WeightVector:
    """Clamp raw ratios to ``[clip_low, clip_high]``, keeping the raw values."""
    if not 0 <= clip_low <= clip_high:
        raise ValueError("need 0 <= clip_low <= clip_high")
    raw = np.asarray(raw, dtype=np.float64)
    clipped = np.clip(raw, clip_low, clip_high)
    n = len(raw)
    return WeightVector(
        raw=raw,
        clipped=clipped,
        clip_bounds=(float(clip_low), float(clip_high)),
        mean_raw=float(raw.mean()) if n else float("nan"),
        fraction_clipped=float(np.count_nonzero(clipped != raw) / n) if n else 0.0,
        ratio_kind=ratio_kind,
        n_floored=int(n_floored),
        quality_warning=bool(n and n_floored > FLOOR_WARNING_FRACTION * n),
    )


def resample_distribution(weights) -> np.ndarray:
    """Categorical distribution proportional to the clipped weights."""
    w = weights.clipped if isinstance(weights, WeightVector) else np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("negative weight")
    total = w.sum()
    if not total > 0:
        raise ValueError("all-zero weights")
    if np.all(w == w[0]):
        return np.full(len(w), 1.0 / len(w))
    return w / total


# ---------------------------------------------------------------------------
# discrete conditionals


class CellConditional:
    """P(label | features) by Laplace-smoothed counts over a partition.

    Continuous features are partitioned into k-means cells (on z-scored
    features); discrete features use their exact values as cells. An
    optional ``extra`` integer column (e.g. the action) refines the cells.
    """

    def __init__(self, n_labels: int, n_cells: int = 100, discrete: bool = False,
                 smoothing: float = 1.0, seed: int = 0):
        self.n_labels = n_labels
        self.n_cells = n_cells
        self.discrete = discrete
        self.smoothing = smoothing
        self.seed = seed

    def fit(self, features, labels, extra=None, n_extra: int = 1) -> "CellConditional":
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        self.n_extra = n_extra
        if self.discrete:
            self.codes_ = np.unique(features, axis=0)
        else:
            self.shift_ = features.mean(0)
            sd = features.std(0)
            self.scale_ = np.where(sd > 0, sd, 1.0)
            z = (features - self.shift_) / self.scale_
            k = min(self.n_cells, len(np.unique(z, axis=0)))
            self.centers_ = density.select_centers(z, k, "kmeans", seed=self.seed)
        cell = self._cells(features, extra)
        n_keys = self._n_base() * n_extra
        counts = np.zeros((n_keys, self.n_labels))
        np.add.at(counts, (cell, labels), 1.0)
        counts += self.smoothing
        self.table_ = counts / counts.sum(1, keepdims=True)
        return self

    def _n_base(self) -> int:
        return len(self.codes_) + 1 if self.discrete else len(self.centers_)

    def _cells(self, features, extra=None) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if self.discrete:
            # unseen codes map to a dedicated all-prior cell
            match = np.all(features[:, None, :] == self.codes_[None], axis=2)
            base = np.where(match.any(1), match.argmax(1), len(self.codes_))
        else:
            z = (features - self.shift_) / self.scale_
            base = np.argmin(density._sqdist(z, self.centers_), axis=1)
        if extra is None:
            return base
        return base * self.n_extra + np.asarray(extra, dtype=np.int64)

    def predict_proba(self, features, extra=None) -> np.ndarray:
        return self.table_[self._cells(features, extra)]

    def to_dict(self) -> dict:
        d = {"n_labels": self.n_labels, "n_cells": self.n_cells, "discrete": self.discrete,
             "smoothing": self.smoothing, "seed": self.seed, "n_extra": self.n_extra,
             "table": self.table_.tolist()}
        if self.discrete:
            d["codes"] = self.codes_.tolist()
        else:
            d.update(shift=self.shift_.tolist(), scale=self.scale_.tolist(), centers=self.centers_.tolist())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CellConditional":
        obj = cls(d["n_labels"], d["n_cells"], d["discrete"], d["smoothing"], d["seed"])
        obj.n_extra = d["n_extra"]
        obj.table_ = np.array(d["table"])
        if obj.discrete:
            obj.codes_ = np.array(d["codes"], dtype=np.float64)
        else:
            obj.shift_, obj.scale_ = np.array(d["shift"]), np.array(d["scale"])
            obj.centers_ = np.array(d["centers"])
        return obj


class LscdePolicy:
    """P(a | s) from a jittered-LSCDE fit, normalized over the action codes."""

    def __init__(self, model: LscdeModel, n_labels: int):
        self.model = model
        self.n_labels = n_labels

    def predict_proba(self, features, extra=None) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        cols = [conditional_density(self.model, features, np.full(len(features), float(a)))
                for a in range(self.n_labels)]
        p = np.stack(cols, 1)
        total = p.sum(1, keepdims=True)
        return np.where(total > 0, p / np.where(total > 0, total, 1.0), 1.0 / self.n_labels)


@dataclass
class DensityBundle:
    ratio_kind: str
    n_actions: int = N_ACTIONS
    outcome_model: Optional[LscdeModel] = None
    policy_model: Optional[object] = None
    u_given_s: Optional[CellConditional] = None
    u_given_sa: Optional[CellConditional] = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ratio_kind not in RATIO_KINDS:
            raise ValueError(f"unknown ratio kind {self.ratio_kind!r}")
        if self.ratio_kind == "backdoor":
            if self.u_given_s is None or self.u_given_sa is None:
                raise ValueError("backdoor bundle needs u_given_s and u_given_sa")
        elif self.outcome_model is None or self.policy_model is None:
            raise ValueError(f"{self.ratio_kind} bundle needs outcome and policy models")


def _blocks(dataset: OfflineDataset):
    """State, next-state and reward feature blocks plus discreteness flags."""
    if dataset.scenario == "Tabular":
        return dataset.s[:, :1], dataset.s_next[:, :1], dataset.r[:, None], True
    return dataset.s, dataset.s_next, dataset.r[:, None], False


def _outcome(dataset: OfflineDataset, ratio_kind: str):
    _, s2, r, disc = _blocks(dataset)
    if ratio_kind == "full":
        y = np.hstack([s2, r])
    elif ratio_kind == "reward-only":
        y = r
    elif ratio_kind == "next-state-only":
        y = s2
    else:
        raise ValueError(ratio_kind)
    return y, np.full(y.shape[1], disc)


def _conditioning(dataset: OfflineDataset, a=None):
    s, _, _, disc = _blocks(dataset)
    a = dataset.a if a is None else a
    x = np.hstack([s, dataset.m[:, None].astype(np.float64), np.asarray(a, dtype=np.float64)[:, None]])
    mask = np.concatenate([np.full(s.shape[1], disc), [True, True]])
    return x, mask


def infer_n_actions(dataset: OfflineDataset) -> int:
    if dataset.scenario != "Tabular":
        return N_ACTIONS
    top = dataset.a.max()
    if dataset.m is not None:
        top = max(top, dataset.m.max())
    return int(top) + 1


def fit_density_bundle(
    dataset: OfflineDataset,
    ratio_kind: str,
    k: int = density.DEFAULT_K,
    lambda_reg: float = density.DEFAULT_LAMBDA,
    bandwidths=None,
    center_method: str = "kmeans",
    policy_estimator: str = "cells",
    policy_cells: int = 100,
    max_fit_samples: Optional[int] = 20_000,
    n_actions: Optional[int] = None,
    jitter_cfg: JitterConfig = JitterConfig(),
    cv_grid: Optional[dict] = None,
    seed: int = 0,
) -> DensityBundle:
    """Fit every estimator the chosen ratio needs.

    Continuous coordinates are z-scored before fitting; the ratios are
    unaffected since the Jacobians cancel. ``bandwidths="cv"`` selects
    ``k``, ``lambda_reg`` and the bandwidths by cross-validation over
    ``cv_grid``. At most ``max_fit_samples`` rows (a seeded subsample)
    enter the density fits.
    """
    n_actions = infer_n_actions(dataset) if n_actions is None else n_actions
    s, _, _, disc = _blocks(dataset)
    info = {}
    if ratio_kind == "backdoor":
        if dataset.u is None:
            raise MissingFieldError("backdoor ratio needs u")
        n_u = int(dataset.u.max()) + 1
        u_s = CellConditional(n_u, policy_cells, disc, seed=seed).fit(s, dataset.u)
        u_sa = CellConditional(n_u, policy_cells, disc, seed=seed).fit(
            s, dataset.u, extra=dataset.a, n_extra=n_actions)
        return DensityBundle(ratio_kind, n_actions, u_given_s=u_s, u_given_sa=u_sa, info=info)

    if dataset.m is None:
        raise MissingFieldError(f"{ratio_kind} ratio needs the intermediate action m")
    rows = np.arange(len(dataset))
    if max_fit_samples is not None and len(rows) > max_fit_samples:
        rows = np.sort(np.random.default_rng(seed).choice(len(rows), max_fit_samples, replace=False))
    sub = dataset.subset(rows)
    x, xmask = _conditioning(sub)
    y, ymask = _outcome(sub, ratio_kind)
    common = dict(discrete_x=xmask, discrete_y=ymask, jitter_cfg=jitter_cfg, standardize=True)
    if isinstance(bandwidths, str) and bandwidths == "cv":
        grid = dict(DEFAULT_CV_GRID, **(cv_grid or {}))
        cv_rows = slice(None)
        if len(x) > grid["max_samples"]:
            cv_rows = np.random.default_rng(seed + 1).choice(len(x), grid["max_samples"], replace=False)
        sel = density.cross_validate(
            x[cv_rows], y[cv_rows], grid["k"], grid["lambda"], grid["bandwidths"], grid["folds"],
            seed=seed, center_method=center_method, **common)
        k, lambda_reg, bandwidths = sel["k"], sel["lambda_reg"], sel["bandwidths"]
        info["cv"] = {"k": k, "lambda_reg": lambda_reg, "bandwidths": bandwidths}
    outcome = density.fit_lscde(x, y, k=k, lambda_reg=lambda_reg, bandwidths=bandwidths, seed=seed,
                                center_method=center_method, **common)
    if policy_estimator == "cells":
        policy = CellConditional(n_actions, policy_cells, disc, seed=seed).fit(s, dataset.a)
    elif policy_estimator == "lscde":
        s_sub = _blocks(sub)[0]
        pm = density.fit_lscde(s_sub, sub.a.astype(np.float64), k=k, lambda_reg=lambda_reg, seed=seed,
                               center_method=center_method, discrete_x=np.full(s_sub.shape[1], disc),
                               discrete_y=[True], jitter_cfg=jitter_cfg, standardize=True)
        policy = LscdePolicy(pm, n_actions)
    else:
        raise ValueError(f"unknown policy estimator {policy_estimator!r}")
    return DensityBundle(ratio_kind, n_actions, outcome_model=outcome, policy_model=policy, info=info)


DEFAULT_CV_GRID = {
    "k": [200],
    "lambda": [0.001, 0.01, 0.1],
    "bandwidths": [0.1, 0.2, 0.3, 0.5, 1.0],
    "folds": 3,
    "max_samples": 5000,
}


def _frontdoor_ratio(dataset: OfflineDataset, bundle: DensityBundle, kind: str,
                     clip=DEFAULT_CLIP) -> WeightVector:
    if bundle.ratio_kind != kind:
        raise ValueError(f"bundle was fitted for {bundle.ratio_kind!r}, not {kind!r}")
    if dataset.m is None:
        raise MissingFieldError("intermediate action m is missing")
    y, _ = _outcome(dataset, kind)
    s = _blocks(dataset)[0]
    p_a = bundle.policy_model.predict_proba(s)
    dens = np.empty((len(dataset), bundle.n_actions))
    for a_alt in range(bundle.n_actions):
        x, _ = _conditioning(dataset, np.full(len(dataset), a_alt))
        dens[:, a_alt] = conditional_density(bundle.outcome_model, x, y)
    numer = (dens * p_a).sum(1)
    denom = dens[np.arange(len(dataset)), dataset.a]
    floored = denom < DENOMINATOR_FLOOR
    raw = numer / np.maximum(denom, DENOMINATOR_FLOOR)
    wv = postprocess_weights(raw, *clip, ratio_kind=kind, n_floored=int(floored.sum()))
    if wv.quality_warning:
        logger.warning("%s: %d of %d denominators floored", kind, wv.n_floored, len(dataset))
    return wv


def estimate_d1(dataset: OfflineDataset, bundle: DensityBundle, clip=DEFAULT_CLIP) -> WeightVector:
    """Full front-door ratio with the joint outcome (s', r)."""
    return _frontdoor_ratio(dataset, bundle, "full", clip)


def estimate_d1_reward_only(dataset: OfflineDataset, bundle: DensityBundle,
                            clip=DEFAULT_CLIP) -> WeightVector:
    """Front-door ratio when the confounder reaches the reward only."""
    return _frontdoor_ratio(dataset, bundle, "reward-only", clip)


def estimate_d1_nextstate_only(dataset: OfflineDataset, bundle: DensityBundle,
                               clip=DEFAULT_CLIP) -> WeightVector:
    """Front-door ratio when the confounder reaches the next state only."""
    return _frontdoor_ratio(dataset, bundle, "next-state-only", clip)


def estimate_d2(dataset: OfflineDataset, bundle: DensityBundle, clip=DEFAULT_CLIP) -> WeightVector:
    """Backdoor ratio P(u | s) / P(u | s, a)."""
    if bundle.ratio_kind != "backdoor":
        raise ValueError(f"bundle was fitted for {bundle.ratio_kind!r}, not 'backdoor'")
    if dataset.u is None:
        raise MissingFieldError("confounder subset u is missing")
    s = _blocks(dataset)[0]
    idx = np.arange(len(dataset))
    p_u_s = bundle.u_given_s.predict_proba(s)[idx, dataset.u]
    p_u_sa = bundle.u_given_sa.predict_proba(s, extra=dataset.a)[idx, dataset.u]
    floored = p_u_sa < DENOMINATOR_FLOOR
    raw = p_u_s / np.maximum(p_u_sa, DENOMINATOR_FLOOR)
    return postprocess_weights(raw, *clip, ratio_kind="backdoor", n_floored=int(floored.sum()))


ESTIMATORS = {
    "full": estimate_d1,
    "reward-only": estimate_d1_reward_only,
    "next-state-only": estimate_d1_nextstate_only,
    "backdoor": estimate_d2,
}


def estimate_weights(dataset: OfflineDataset, bundle: DensityBundle, clip=DEFAULT_CLIP) -> WeightVector:
    return ESTIMATORS[bundle.ratio_kind](dataset, bundle, clip)


# ---------------------------------------------------------------------------
# exact oracle


def exact_ratio_oracle(cmdp: TabularCMDP, ratio_kind: str):
    """Exact ratio for a finite CMDP, by direct summation over its tables.

    Returns a function accepting an ``OfflineDataset`` (vectorized) or a
    single ``Transition``.
    """
    if ratio_kind not in RATIO_KINDS:
        raise ValueError(f"unknown ratio kind {ratio_kind!r}")
    if ratio_kind == "backdoor":
        post = cmdp.w_given_sa()  # P(u | s, a) with u = w
        table = cmdp.p_w[:, None, :] / post  # [s, a, u]

        def lookup(s, a, m, u, s2, r):
            return table[s, a, u]
    else:
        if not cmdp.frontdoor:
            raise ValueError("front-door ratios need an intermediate action")
        table = _oracle_table(cmdp, ratio_kind)  # [s, m, a, outcome...]

        def lookup(s, a, m, u, s2, r):
            if ratio_kind == "reward-only":
                return table[s, m, a, r]
            if ratio_kind == "next-state-only":
                return table[s, m, a, s2]
            return table[s, m, a, s2, r]

    def oracle(data):
        if isinstance(data, OfflineDataset):
            return lookup(*tabular_codes(data, cmdp))
        s = int(data.s[0])
        s2 = int(data.s_next[0])
        r = int(cmdp.reward_index(data.r))
        return float(lookup(s, data.a, data.m, data.u, s2, r))

    return oracle


def offline_mean_of_oracle(cmdp: TabularCMDP, ratio_kind: str) -> float:
    """E[d] under the offline distribution, computed exactly."""
    mu = cmdp.mu
    if ratio_kind == "backdoor":
        post = cmdp.w_given_sa()
        p_sa = mu[:, None] * cmdp.policy_marginal()
        d = cmdp.p_w[:, None, :] / post
        return float(np.einsum("sa,saw,saw->", p_sa, post, d))
    p_sam = np.einsum("s,sa,sam->sma", mu, cmdp.policy_marginal(), cmdp.p_m)
    cond = _outcome_table(cmdp, ratio_kind)
    d = _oracle_table(cmdp, ratio_kind)
    n = cond.shape[0] * cond.shape[1] * cond.shape[2]
    return float(np.einsum("i,ij,ij->", p_sam.ravel(), cond.reshape(n, -1), d.reshape(n, -1)))


def _outcome_table(cmdp: TabularCMDP, ratio_kind: str) -> np.ndarray:
    """Offline P(outcome | m, a, s) for the ratio's outcome, [s, m, a, ...]."""
    joint = cmdp.outcome_given_mas()  # [s, m, a, s', r]
    if ratio_kind == "reward-only":
        return joint.sum(3)
    if ratio_kind == "next-state-only":
        return joint.sum(4)
    return joint


def _oracle_table(cmdp: TabularCMDP, ratio_kind: str) -> np.ndarray:
    cond = _outcome_table(cmdp, ratio_kind)
    p_a = cmdp.policy_marginal()  # [s, a]
    shape = (cond.shape[0], cond.shape[1], 1) + cond.shape[3:]
    return np.einsum("sma...,sa->sm...", cond, p_a).reshape(shape) / cond


# ---------------------------------------------------------------------------
# bundle and weight files


def save_bundle(bundle: DensityBundle, directory) -> None:
    """Write a bundle as a directory of text files (LSCDE models in their
    own format, count tables as JSON)."""
    os.makedirs(directory, exist_ok=True)
    meta = {"ratio_kind": bundle.ratio_kind, "n_actions": bundle.n_actions, "info": bundle.info}
    if bundle.ratio_kind == "backdoor":
        meta["u_given_s"] = bundle.u_given_s.to_dict()
        meta["u_given_sa"] = bundle.u_given_sa.to_dict()
    else:
        density.save_model(bundle.outcome_model, os.path.join(directory, "outcome.model"))
        if isinstance(bundle.policy_model, LscdePolicy):
            density.save_model(bundle.policy_model.model, os.path.join(directory, "policy.model"))
            meta["policy"] = "lscde"
        else:
            meta["policy"] = bundle.policy_model.to_dict()
    atomic_write_text(os.path.join(directory, "bundle.json"), json.dumps(meta, sort_keys=True, indent=1))


def load_bundle(directory) -> DensityBundle:
    with open(os.path.join(directory, "bundle.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    kind, n_actions = meta["ratio_kind"], meta["n_actions"]
    info = meta.get("info", {})
    if kind == "backdoor":
        return DensityBundle(kind, n_actions, u_given_s=CellConditional.from_dict(meta["u_given_s"]),
                             u_given_sa=CellConditional.from_dict(meta["u_given_sa"]), info=info)
    outcome = density.load_model(os.path.join(directory, "outcome.model"))
    if meta["policy"] == "lscde":
        policy = LscdePolicy(density.load_model(os.path.join(directory, "policy.model")), n_actions)
    else:
        policy = CellConditional.from_dict(meta["policy"])
    return DensityBundle(kind, n_actions, outcome_model=outcome, policy_model=policy, info=info)



def save_weights(wv: WeightVector, path) -> None:
    lo, hi = wv.clip_bounds
    lines = [
        f"# ratio_kind={wv.ratio_kind}",
        f"# clip_low={lo!r}",
        f"# clip_high={hi!r}",
        f"# raw_mean={wv.mean_raw!r}",
        f"# flagged={wv.n_floored}",
        f"# n={len(wv)}",
    ]
    lines += [format(float(v), ".17g") for v in wv.raw]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_weights(path) -> WeightVector:
    header, values = {}, []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                header[key] = value
            else:
                try:
                    values.append(float(line))
                except ValueError:
                    raise ValueError(f"line {lineno}: not a real number: {line!r}") from None
    if "n" in header and int(header["n"]) != len(values):
        raise ValueError(f"weight file declares n={header['n']} but holds {len(values)} values")
    return postprocess_weights(np.array(values), float(header["clip_low"]), float(header["clip_high"]),
                               ratio_kind=header.get("ratio_kind", ""),
                               n_floored=int(header.get("flagged", 0)))
