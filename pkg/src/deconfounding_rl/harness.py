"""Experiment orchestration: data -> density -> weights -> train/eval -> report.

Every stage artifact is cached under a file name derived from the digest
of exactly the config fields it depends on, so changing e.g. the learning
rate reuses the dataset and the weights. Artifacts carry their digest in
the header; a mismatch marks the entry stale and it is rebuilt.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import pendulum, weights as W
from .cmdp import ExperimentConfig, OfflineDataset, atomic_write_text, load_dataset, save_dataset
from .nets import load_params, save_params
from .training import TrainConfig, TrainResult, train

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("scenario", "algo", "mode", "seed", "step", "mean_return")
SETTING_KEYS = ("scenario", "p_fail", "odds", "v_threshold", "irrational_prob")
DATA_KEYS = pendulum.DATA_KEYS
DENSITY_KEYS = DATA_KEYS + ("ratio_kind", "n_centers", "lambda_reg", "bandwidth_x", "bandwidth_y",
                            "center_method", "cross_validate", "policy_estimator", "policy_cells",
                            "max_fit_samples")
WEIGHT_KEYS = DENSITY_KEYS + ("clip_low", "clip_high")
TRAIN_KEYS = ("algo", "mode", "train_steps", "eval_every", "eval_episodes", "learning_rate", "batch_size",
              "gamma", "target_sync_interval", "alpha_ent", "cql_weight", "reward_scale", "optimizer")
BC_PARTS = 10
MODE_SUFFIX = {"none": "", "reweight": "_RW", "resample": "_RS"}


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True, order=True)
class EvalRecord:
    scenario: str
    algo: str
    mode: str
    seed: int
    step: int
    mean_return: float


def algo_label(algo: str, mode: str) -> str:
    """Table label such as ``CQL_RW``."""
    return algo.upper() + MODE_SUFFIX[mode]


def setting_of(config: ExperimentConfig) -> tuple:
    return tuple(getattr(config, k) for k in SETTING_KEYS)


# ---------------------------------------------------------------------------
# cache


class Cache:
    """Digest-addressed artifact store; ``directory=None`` disables it."""

    def __init__(self, directory: Optional[str] = None):
        self.directory = directory
        if directory:
            os.makedirs(directory, exist_ok=True)

    def path(self, stage: str, digest: str, suffix: str = "") -> Optional[str]:
        if not self.directory:
            return None
        return os.path.join(self.directory, f"{stage}-{digest}{suffix}")

    @staticmethod
    def exists(path: Optional[str]) -> bool:
        return bool(path) and os.path.exists(path)


def _stage(name: str):
    def wrap(fn):
        def run(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
                raise StageError(name, exc) from exc

        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run

    return wrap


def weights_needed(config: ExperimentConfig) -> bool:
    return config.mode != "none" and config.algo != "bc"


def train_digest(config: ExperimentConfig, seed: int) -> str:
    keys = TRAIN_KEYS + (WEIGHT_KEYS if weights_needed(config) else DATA_KEYS)
    return config.digest(keys) + f"-s{seed}"


# ---------------------------------------------------------------------------
# stages


@_stage("gen-data")
def stage_data(config: ExperimentConfig, cache: Cache) -> Tuple[OfflineDataset, bool]:
    digest = config.digest(DATA_KEYS)
    path = cache.path("data", digest, ".csv")
    expected = digest + ":scripted-rational"
    if Cache.exists(path):
        ds = load_dataset(path)
        if ds.generator_config_digest == expected:
            return ds, True
        logger.warning("stale dataset cache %s (digest %s)", path, ds.generator_config_digest)
    ds = pendulum.generate_offline_dataset(config.scenario, config)
    if path:
        save_dataset(ds, path)
    return ds, False


def _bandwidths(config: ExperimentConfig):
    if config.cross_validate:
        return "cv"
    if config.bandwidth_x is None and config.bandwidth_y is None:
        return None
    if config.bandwidth_x is None or config.bandwidth_y is None:
        raise ValueError("set both bandwidth_x and bandwidth_y, or neither")
    return (config.bandwidth_x, config.bandwidth_y)


def _read_stamp(path: str) -> Optional[str]:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read().strip()
    except OSError:
        return None


@_stage("fit-density")
def stage_density(config: ExperimentConfig, dataset: OfflineDataset, cache: Cache) -> Tuple[W.DensityBundle, bool]:
    digest = config.digest(DENSITY_KEYS)
    directory = cache.path("density", digest)
    stamp = os.path.join(directory, "digest") if directory else None
    if directory and _read_stamp(stamp) == digest:
        return W.load_bundle(directory), True
    bundle = W.fit_density_bundle(
        dataset, config.ratio_kind, k=config.n_centers, lambda_reg=config.lambda_reg,
        bandwidths=_bandwidths(config), center_method=config.center_method,
        policy_estimator=config.policy_estimator, policy_cells=config.policy_cells,
        max_fit_samples=config.max_fit_samples, seed=config.data_seed)
    if directory:
        W.save_bundle(bundle, directory)
        atomic_write_text(stamp, digest + "\n")
    return bundle, False


@_stage("weights")
def stage_weights(config: ExperimentConfig, dataset: OfflineDataset, bundle: Optional[W.DensityBundle],
                  cache: Cache) -> Tuple[W.WeightVector, bool]:
    digest = config.digest(WEIGHT_KEYS)
    path = cache.path("weights", digest, ".txt")
    if Cache.exists(path) and _read_stamp(path + ".digest") == digest:
        return W.load_weights(path), True
    if bundle is None:
        bundle, _ = stage_density(config, dataset, cache)
    wv = W.estimate_weights(dataset, bundle, clip=(config.clip_low, config.clip_high))
    if path:
        W.save_weights(wv, path)
        atomic_write_text(path + ".digest", digest + "\n")
    return wv, False


def train_config(config: ExperimentConfig) -> TrainConfig:
    return TrainConfig(
        gamma=config.gamma, learning_rate=config.learning_rate, batch_size=config.batch_size,
        target_sync_interval=config.target_sync_interval, alpha_ent=config.alpha_ent,
        cql_weight=config.cql_weight, total_steps=config.train_steps,
        mode="none" if config.algo == "bc" else config.mode, reward_scale=config.reward_scale,
        optimizer=config.optimizer)


def evaluate(config: ExperimentConfig, policy, seed: int, step: int) -> float:
    """Online mean return over ``config.eval_episodes`` episodes; the RNG
    depends only on (seed, step) so every algorithm sees the same draws."""
    rng = np.random.default_rng([seed, step, 0xE7A1])
    return pendulum.online_rollout(config.scenario, policy, config, rng, config.eval_episodes)


@_stage("train")
def stage_train(config: ExperimentConfig, dataset: OfflineDataset, wv: Optional[W.WeightVector], seed: int,
                cache: Cache) -> Tuple[List[EvalRecord], Optional[TrainResult], bool]:
    """Train one seed, evaluating every ``eval_every`` steps."""
    digest = train_digest(config, seed)
    rec_path = cache.path("train", digest, ".csv")
    if Cache.exists(rec_path) and _read_stamp(rec_path + ".digest") == digest:
        return read_csv(rec_path), None, True
    records: List[EvalRecord] = []

    def callback(step, result):
        ret = evaluate(config, result.act, seed, step)
        records.append(EvalRecord(config.scenario, config.algo, config.mode, seed, step, ret))

    result = train(dataset, wv if weights_needed(config) else None, config.algo, train_config(config),
                   seed, callback, config.eval_every)
    if config.train_steps % config.eval_every:
        # always score the final parameters
        callback(config.train_steps, result)
    if rec_path:
        emit_csv(records, rec_path)
        net = result.policy if config.algo in ("sac", "bc") else result.q
        save_params(net, cache.path("params", digest, ".txt"), "policy" if config.algo in ("sac", "bc") else "q")
        atomic_write_text(rec_path + ".digest", digest + "\n")
    return records, result, False


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class ReportCell:
    setting: tuple
    label: str
    best: Optional[float]
    final: Optional[float] = None
    curve: List[Tuple[int, float]] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return self.best is None


@dataclass
class PipelineResult:
    config: ExperimentConfig
    records: List[EvalRecord]
    cell: ReportCell
    cached: Dict[str, bool]
    seconds: float


def seed_mean_curve(records: Iterable[EvalRecord]) -> List[Tuple[int, float]]:
    """(step, mean over seeds) sorted by step; steps missing for some seed
    are averaged over the seeds that have them."""
    by_step = defaultdict(list)
    for r in records:
        by_step[r.step].append(r.mean_return)
    return [(step, float(np.mean(v))) for step, v in sorted(by_step.items())]


def best_of_averages(curve: Sequence[Tuple[int, float]], parts: Optional[int] = None) -> float:
    """Headline number: max over evaluation points of the seed average.

    With ``parts`` the curve is split into that many consecutive chunks,
    averaged within each, and the best chunk is returned.
    """
    values = np.array([v for _, v in curve], dtype=np.float64)
    if len(values) == 0:
        raise ValueError("empty curve")
    if parts:
        chunks = [c for c in np.array_split(values, min(parts, len(values))) if len(c)]
        return float(max(c.mean() for c in chunks))
    return float(values.max())


def make_cell(config: ExperimentConfig, records: Sequence[EvalRecord]) -> ReportCell:
    curve = seed_mean_curve(records)
    label = algo_label(config.algo, "none" if config.algo == "bc" else config.mode)
    if not curve:
        return ReportCell(setting_of(config), label, None)
    parts = BC_PARTS if config.algo == "bc" else None
    return ReportCell(setting_of(config), label, best_of_averages(curve, parts), curve[-1][1], curve)


def _run_seed(args):
    config, seed, cache_dir = args
    cache = Cache(cache_dir)
    ds, _ = stage_data(config, cache)
    wv = stage_weights(config, ds, None, cache)[0] if weights_needed(config) else None
    records, _, cached = stage_train(config, ds, wv, seed, cache)
    return records, cached


def run_pipeline(config: ExperimentConfig, cache_dir: Optional[str] = None,
                 seeds: Optional[Sequence[int]] = None, workers: int = 1) -> PipelineResult:
    """Run every stage for ``config`` over its seeds.

    Upstream stages run once in this process (so their cache is warm);
    with ``workers > 1`` the per-seed training jobs go to a process pool.
    """
    start = time.perf_counter()
    seeds = tuple(config.seeds if seeds is None else seeds)
    cache = Cache(cache_dir)
    ds, data_cached = stage_data(config, cache)
    cached = {"gen-data": data_cached}
    if weights_needed(config):
        if cache_dir is None:
            bundle, cached["fit-density"] = stage_density(config, ds, cache)
            wv, cached["weights"] = stage_weights(config, ds, bundle, cache)
        else:
            wv, cached["weights"] = stage_weights(config, ds, None, cache)
    else:
        wv = None
    records: List[EvalRecord] = []
    if workers > 1 and cache_dir and len(seeds) > 1:
        with ProcessPoolExecutor(workers) as pool:
            outs = list(pool.map(_run_seed, [(config, s, cache_dir) for s in seeds]))
    else:
        outs = [stage_train(config, ds, wv, s, cache)[::2] for s in seeds]
    for recs, was_cached in outs:
        records.extend(recs)
    cached["train"] = all(c for _, c in outs)
    records.sort(key=_sort_key)
    return PipelineResult(config, records, make_cell(config, records), cached, time.perf_counter() - start)


# ---------------------------------------------------------------------------
# suites: several configs sharing a base


def load_suite(path) -> List[ExperimentConfig]:
    """A config file holds either one ExperimentConfig mapping, or
    ``{"base": {...}, "runs": [{overrides}, ...]}``."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return suite_from_dict(raw)


def suite_from_dict(raw: dict) -> List[ExperimentConfig]:
    if not isinstance(raw, dict):
        raise ValueError("config must be a JSON object")
    if "runs" not in raw:
        return [ExperimentConfig.from_dict(raw)]
    unknown = set(raw) - {"base", "runs"}
    if unknown:
        raise ValueError(f"unknown suite keys: {sorted(unknown)}")
    base = raw.get("base", {})
    if not raw["runs"]:
        raise ValueError("suite has no runs")
    return [ExperimentConfig.from_dict({**base, **run}) for run in raw["runs"]]


def run_suite(configs: Sequence[ExperimentConfig], cache_dir: Optional[str] = None,
              seeds: Optional[Sequence[int]] = None, workers: int = 1):
    """Run every config; a failing config yields a FAILED cell instead of
    stopping the suite. Returns (records, cells, errors)."""
    records, cells, errors = [], [], []
    for cfg in configs:
        try:
            res = run_pipeline(cfg, cache_dir, seeds, workers)
        except StageError as exc:
            logger.error("%s: %s", algo_label(cfg.algo, cfg.mode), exc)
            errors.append(exc)
            cells.append(ReportCell(setting_of(cfg), algo_label(cfg.algo, cfg.mode), None))
            continue
        records.extend(res.records)
        cells.append(res.cell)
    return sorted(records, key=_sort_key), cells, errors


# ---------------------------------------------------------------------------
# output files


def _sort_key(r: EvalRecord):
    return (r.algo, r.seed, r.step, r.mode, r.scenario)


def format_csv(records: Iterable[EvalRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in sorted(records, key=_sort_key):
        writer.writerow([r.scenario, r.algo, r.mode, r.seed, r.step, repr(float(r.mean_return))])
    return buf.getvalue()


def emit_csv(records: Iterable[EvalRecord], path) -> None:
    """One row per record, sorted by (algo, seed, step)."""
    atomic_write_text(path, format_csv(records))


def read_csv(path) -> List[EvalRecord]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected header {header}")
        return [EvalRecord(sc, al, mo, int(se), int(st), float(ret)) for sc, al, mo, se, st, ret in reader]


def _fmt_setting(setting: tuple) -> str:
    return " ".join(f"{k}={v}" for k, v in zip(SETTING_KEYS, setting))


def emit_report(cells: Sequence[ReportCell], path) -> bool:
    """Write the setting x algorithm table (best and final seed-averaged
    return) and a curve file next to it. Returns True when every cell
    is present."""
    settings = list(dict.fromkeys(c.setting for c in cells))
    labels = list(dict.fromkeys(c.label for c in cells))
    grid = {(c.setting, c.label): c for c in cells}
    lines = ["setting," + ",".join(labels)]
    complete = True
    for which in ("best", "final"):
        for setting in settings:
            row = [f"{which}: {_fmt_setting(setting)}"]
            for label in labels:
                cell = grid.get((setting, label))
                if cell is None or cell.failed:
                    row.append("FAILED")
                    complete = False
                else:
                    row.append(f"{getattr(cell, which):.2f}")
            lines.append(",".join(row))
    atomic_write_text(path, "\n".join(lines) + "\n")

    blocks = []
    for c in cells:
        if c.failed:
            continue
        head = f"# setting={_fmt_setting(c.setting)} curve={c.label}\nstep,mean_return"
        blocks.append(head + "\n" + "\n".join(f"{s},{v!r}" for s, v in c.curve))
    atomic_write_text(curves_path(path), "\n\n".join(blocks) + "\n")
    return complete


def curves_path(report_path) -> str:
    root, _ = os.path.splitext(os.fspath(report_path))
    return root + ".curves.csv"


def load_trained(config: ExperimentConfig, seed: int, cache_dir: str):
    """Parameters saved by the train stage, or None if absent."""
    path = Cache(cache_dir).path("params", train_digest(config, seed), ".txt")
    return load_params(path) if Cache.exists(path) else None


__all__ = [
    "CSV_COLUMNS",
    "Cache",
    "EvalRecord",
    "PipelineResult",
    "ReportCell",
    "StageError",
    "algo_label",
    "best_of_averages",
    "emit_csv",
    "emit_report",
    "load_suite",
    "make_cell",
    "read_csv",
    "run_pipeline",
    "run_suite",
    "seed_mean_curve",
]
