"""Shared domain types: action space, transitions, offline datasets, configs.

Datasets are stored column-wise as numpy arrays; ``Transition`` is the
row view used when a single sample is needed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

# Torques in newton-meters, indexed 0..4.
ACTIONS = np.array([-2, -1, 0, 1, 2], dtype=np.int64)
N_ACTIONS = len(ACTIONS)

SCENARIOS = (
    "EmotionalPendulum",
    "WindyPendulum",
    "EmotionalPendulumStar",
    "WindyPendulumStar",
    "Tabular",
)
COLUMNS = ("x", "y", "v", "a", "m", "u", "x2", "y2", "v2", "r", "done")


class DatasetFormatError(ValueError):
    """Raised when a dataset file or object violates the format contract."""


def action_index(torque) -> np.ndarray:
    """Map torque value(s) in {-2,...,2} to action indices."""
    return np.asarray(torque, dtype=np.int64) + 2


def action_torque(index) -> np.ndarray:
    return ACTIONS[np.asarray(index, dtype=np.int64)]


def is_star(scenario: str) -> bool:
    return scenario.endswith("Star")


class Transition(NamedTuple):
    s: np.ndarray
    a: int
    m: Optional[int]
    u: Optional[int]
    s_next: np.ndarray
    r: float
    done: bool


@dataclass(frozen=True, eq=False)
class OfflineDataset:
    """Ordered offline transitions plus scenario metadata.

    ``m`` is populated for the unobserved-confounder scenarios (and
    ``Tabular``), ``u`` for the Star scenarios. Either may be set for
    ``Tabular`` data.
    """

    s: np.ndarray
    a: np.ndarray
    s_next: np.ndarray
    r: np.ndarray
    done: np.ndarray
    scenario: str
    m: Optional[np.ndarray] = None
    u: Optional[np.ndarray] = None
    generator_config_digest: str = ""
    seed: int = 0
    n: int = field(init=False)

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise DatasetFormatError(f"unknown scenario {self.scenario!r}")
        s = np.asarray(self.s, dtype=np.float64).reshape(-1, 3)
        n = len(s)
        if n == 0:
            raise DatasetFormatError("empty dataset")
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "s_next", np.asarray(self.s_next, dtype=np.float64).reshape(n, 3))
        object.__setattr__(self, "a", np.asarray(self.a, dtype=np.int64).reshape(n))
        object.__setattr__(self, "r", np.asarray(self.r, dtype=np.float64).reshape(n))
        object.__setattr__(self, "done", np.asarray(self.done, dtype=bool).reshape(n))
        for name in ("m", "u"):
            col = getattr(self, name)
            if col is not None:
                object.__setattr__(self, name, np.asarray(col, dtype=np.int64).reshape(n))
        object.__setattr__(self, "n", n)
        if not np.all(np.isfinite(self.r)):
            raise DatasetFormatError("non-finite reward")
        if self.scenario == "Tabular":
            if self.m is None and self.u is None:
                raise DatasetFormatError("Tabular dataset needs m or u")
        elif is_star(self.scenario):
            if self.m is not None or self.u is None:
                raise DatasetFormatError(f"{self.scenario} rows need u and no m")
        elif self.m is None or self.u is not None:
            raise DatasetFormatError(f"{self.scenario} rows need m and no u")
        for arr in (self.s, self.a, self.s_next, self.r, self.done, self.m, self.u):
            if arr is not None:
                arr.setflags(write=False)

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> Transition:
        return Transition(
            self.s[i],
            int(self.a[i]),
            None if self.m is None else int(self.m[i]),
            None if self.u is None else int(self.u[i]),
            self.s_next[i],
            float(self.r[i]),
            bool(self.done[i]),
        )

    def __iter__(self) -> Iterator[Transition]:
        return (self[i] for i in range(self.n))

    def __eq__(self, other) -> bool:
        if not isinstance(other, OfflineDataset):
            return NotImplemented
        if (self.scenario, self.seed, self.generator_config_digest, self.n) != (
            other.scenario,
            other.seed,
            other.generator_config_digest,
            other.n,
        ):
            return False
        for name in ("s", "a", "m", "u", "s_next", "r", "done"):
            x, y = getattr(self, name), getattr(other, name)
            if (x is None) != (y is None):
                return False
            if x is not None and not np.array_equal(x, y):
                return False
        return True

    @property
    def transitions(self) -> list[Transition]:
        return list(self)

    def subset(self, idx) -> "OfflineDataset":
        idx = np.asarray(idx)
        return OfflineDataset(
            s=self.s[idx],
            a=self.a[idx],
            s_next=self.s_next[idx],
            r=self.r[idx],
            done=self.done[idx],
            scenario=self.scenario,
            m=None if self.m is None else self.m[idx],
            u=None if self.u is None else self.u[idx],
            generator_config_digest=self.generator_config_digest,
            seed=self.seed,
        )


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def save_dataset(dataset: OfflineDataset, path) -> None:
    """Write ``dataset`` as a commented-header CSV table.

    Reals use 17 significant digits so the file round-trips bit-exactly.
    The write goes to a temporary file that is renamed into place.
    """
    if dataset.n == 0:
        raise DatasetFormatError("empty dataset")
    if not np.all(np.isfinite(dataset.r)):
        raise DatasetFormatError("NaN reward cannot be serialized")
    lines = [
        f"# scenario={dataset.scenario}",
        f"# seed={dataset.seed}",
        f"# config_digest={dataset.generator_config_digest}",
        f"# n={dataset.n}",
        "# columns=" + ",".join(COLUMNS),
    ]
    m = dataset.m
    u = dataset.u
    for i in range(dataset.n):
        s = dataset.s[i]
        s2 = dataset.s_next[i]
        row = [
            _fmt(s[0]),
            _fmt(s[1]),
            _fmt(s[2]),
            str(int(dataset.a[i])),
            "" if m is None else str(int(m[i])),
            "" if u is None else str(int(u[i])),
            _fmt(s2[0]),
            _fmt(s2[1]),
            _fmt(s2[2]),
            _fmt(dataset.r[i]),
            "1" if dataset.done[i] else "0",
        ]
        lines.append(",".join(row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def atomic_write_text(path, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_dataset(path) -> OfflineDataset:
    """Parse a file written by :func:`save_dataset`.

    Raises ``DatasetFormatError`` naming the offending line on malformed
    rows, and on a mismatch between the scenario tag and populated fields.
    """
    header = {}
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                key, sep, value = line[1:].strip().partition("=")
                if not sep:
                    raise DatasetFormatError(f"line {lineno}: malformed header {line!r}")
                header[key.strip()] = value.strip()
                continue
            cells = line.split(",")
            if len(cells) != len(COLUMNS):
                raise DatasetFormatError(
                    f"line {lineno}: expected {len(COLUMNS)} cells, got {len(cells)}"
                )
            try:
                rows.append(
                    (
                        float(cells[0]),
                        float(cells[1]),
                        float(cells[2]),
                        int(cells[3]),
                        None if cells[4] == "" else int(cells[4]),
                        None if cells[5] == "" else int(cells[5]),
                        float(cells[6]),
                        float(cells[7]),
                        float(cells[8]),
                        float(cells[9]),
                        _parse_bool(cells[10]),
                    )
                )
            except ValueError as exc:
                raise DatasetFormatError(f"line {lineno}: {exc}") from None

    for key in ("scenario", "seed", "config_digest", "columns"):
        if key not in header:
            raise DatasetFormatError(f"missing header field {key!r}")
    if tuple(header["columns"].split(",")) != COLUMNS:
        raise DatasetFormatError(f"unexpected columns {header['columns']!r}")
    if not rows:
        raise DatasetFormatError("empty dataset")
    if "n" in header and int(header["n"]) != len(rows):
        raise DatasetFormatError(
            f"line {lineno}: header declares n={header['n']} but file has {len(rows)} rows"
        )

    def optional_column(j: int, name: str):
        present = [r[j] is not None for r in rows]
        if all(present):
            return np.array([r[j] for r in rows], dtype=np.int64)
        if any(present):
            raise DatasetFormatError(f"column {name} is only partly populated")
        return None

    data = np.array([(r[0], r[1], r[2], r[6], r[7], r[8], r[9]) for r in rows], dtype=np.float64)
    return OfflineDataset(
        s=data[:, 0:3],
        a=np.array([r[3] for r in rows], dtype=np.int64),
        m=optional_column(4, "m"),
        u=optional_column(5, "u"),
        s_next=data[:, 3:6],
        r=data[:, 6],
        done=np.array([r[10] for r in rows], dtype=bool),
        scenario=header["scenario"],
        generator_config_digest=header["config_digest"],
        seed=int(header["seed"]),
    )


def _parse_bool(cell: str) -> bool:
    if cell in ("0", "1"):
        return cell == "1"
    raise ValueError(f"invalid done flag {cell!r}")


def minibatch_iter(
    dataset_or_n, batch_size: int, sampler=None, seed: int = 0
) -> Iterator[np.ndarray]:
    """Yield an endless, seed-deterministic stream of index batches.

    ``sampler`` is ``None``/``"uniform"`` or a probability vector over the
    rows. Both modes consume one uniform variate per index, so a
    categorical distribution with identical masses yields exactly the
    uniform stream.
    """
    n = dataset_or_n if isinstance(dataset_or_n, (int, np.integer)) else len(dataset_or_n)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    cdf = None
    if sampler is not None and not (isinstance(sampler, str) and sampler == "uniform"):
        p = np.asarray(sampler, dtype=np.float64)
        if p.shape != (n,):
            raise ValueError(f"distribution has shape {p.shape}, expected ({n},)")
        total = p.sum()
        if not total > 0 or np.any(p < 0):
            raise ValueError("zero-mass distribution")
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"distribution sums to {total}, not 1")
        if not np.all(p == p[0]):
            cdf = np.cumsum(p)
            cdf /= cdf[-1]
    rng = np.random.default_rng(seed)
    while True:
        u = rng.random(batch_size)
        if cdf is None:
            yield np.minimum((u * n).astype(np.int64), n - 1)
        else:
            yield np.minimum(np.searchsorted(cdf, u, side="right"), n - 1)


@dataclass
class ExperimentConfig:
    """Everything needed to regenerate one experiment end to end.

    ``odds`` is odds1 for the Emotional tasks and odds2 for the Windy ones;
    ``irrational_prob`` is I_p1 or I_p2 likewise.
    """

    scenario: str = "EmotionalPendulum"
    p_fail: float = 0.2
    odds: float = 4.0
    v_threshold: float = 1.0
    irrational_prob: float = 0.7
    n_transitions: int = 50_000
    rational_epsilon: float = 0.0
    # density fitting
    n_centers: int = 200
    lambda_reg: float = 0.1
    bandwidth_x: Optional[float] = None
    bandwidth_y: Optional[float] = None
    center_method: str = "kmeans"
    cross_validate: bool = False
    policy_estimator: str = "cells"
    policy_cells: int = 100
    max_fit_samples: int = 20_000
    clip_low: float = 0.1
    clip_high: float = 10.0
    # training
    algo: str = "dqn"
    mode: str = "none"
    ratio_kind: str = "full"
    train_steps: int = 30_000
    eval_every: int = 1_000
    eval_episodes: int = 20
    seeds: Sequence[int] = (0, 1, 2)
    learning_rate: float = 3e-4
    batch_size: int = 256
    gamma: float = 0.99
    target_sync_interval: int = 1_000
    alpha_ent: float = 0.2
    cql_weight: float = 1.0
    reward_scale: float = 1.0
    optimizer: str = "adam"
    data_seed: int = 0

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.validate()

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        for name in ("p_fail", "irrational_prob", "rational_epsilon"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")
        if not self.odds > 0:
            raise ValueError("odds must be > 0")
        if self.n_transitions < 1:
            raise ValueError("dataset size must be >= 1")
        if self.mode not in ("none", "reweight", "resample"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.ratio_kind not in ("full", "reward-only", "next-state-only", "backdoor"):
            raise ValueError(f"unknown ratio kind {self.ratio_kind!r}")
        if self.algo not in ("dqn", "ddqn", "sac", "cql", "bc"):
            raise ValueError(f"unknown algorithm {self.algo!r}")
        if self.center_method not in ("kmeans", "random"):
            raise ValueError(f"unknown center method {self.center_method!r}")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0 <= self.clip_low <= self.clip_high:
            raise ValueError("need 0 <= clip_low <= clip_high")
        if self.eval_every < 1 or self.train_steps < 0:
            raise ValueError("eval_every must be >= 1 and train_steps >= 0")
        if self.ratio_kind == "backdoor" and not is_star(self.scenario) and self.mode != "none":
            raise ValueError("backdoor ratio needs a Star scenario")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def digest(self, keys: Optional[Sequence[str]] = None) -> str:
        """Stable hash of the config (or of the named subset of fields)."""
        d = self.to_dict()
        if keys is not None:
            d = {k: d[k] for k in keys}
        blob = json.dumps(d, sort_keys=True, default=_json_default).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _json_default(x):
    if isinstance(x, float) and math.isinf(x):
        return "inf"
    raise TypeError(x)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(json.load(fh))
