"""Least-squares conditional density estimation (LSCDE) for mixed data.

The model is a nonnegative combination of product-Gaussian kernels

    r(x, y) = sum_i alpha_i exp(-|x - cx_i|^2 / 2 sx^2) exp(-|y - cy_i|^2 / 2 sy^2)

fitted by regularized least squares against the true conditional density
and normalized in closed form over ``y``. Discrete coordinates are made
continuous by jittering them once at fit time; queries use the raw
integer codes.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DENOMINATOR_FLOOR = 1e-300
DEFAULT_K = 200
DEFAULT_LAMBDA = 0.1


class DegenerateFitError(RuntimeError):
    pass


class SingularFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class JitterConfig:
    theta_jit: float = 0.5
    v_beta: float = 5.0

    def __post_init__(self):
        if self.theta_jit < 0 or not self.v_beta > 0:
            raise ValueError("need theta_jit >= 0 and v_beta > 0")


def jitter(value, cfg: JitterConfig = JitterConfig(), rng: Optional[np.random.Generator] = None,
           eps=None, beta=None):
    """``value + eps + theta * (B - 0.5)`` with eps ~ U(-0.5, 0.5), B ~ Beta(v, v).

    ``eps`` and ``beta`` may be supplied to pin the noise.
    """
    value = np.asarray(value, dtype=np.float64)
    if eps is None:
        eps = rng.uniform(-0.5, 0.5, value.shape)
    if beta is None:
        beta = rng.beta(cfg.v_beta, cfg.v_beta, value.shape)
    out = value + eps + cfg.theta_jit * (np.asarray(beta) - 0.5)
    return out if np.ndim(out) else float(out)


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * a @ b.T
    return np.maximum(d, 0.0)


def kmeans(samples: np.ndarray, k: int, rng: np.random.Generator,
           tol: float = 1e-6, max_iter: int = 100) -> np.ndarray:
    """Lloyd's algorithm from k-means++ seeding."""
    n = len(samples)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = rng.integers(n)
    d2 = _sqdist(samples, samples[chosen[:1]])[:, 0]
    for j in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        else:
            # every sample coincides with a chosen center; fall back to unchosen rows
            free = np.setdiff1d(np.arange(n), chosen[:j])
            idx = int(rng.choice(free))
        chosen[j] = idx
        d2 = np.minimum(d2, _sqdist(samples, samples[idx : idx + 1])[:, 0])
    centers = samples[chosen].copy()
    for _ in range(max_iter):
        labels = np.argmin(_sqdist(samples, centers), axis=1)
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, samples)
        new = centers.copy()
        nonempty = counts > 0
        new[nonempty] = sums[nonempty] / counts[nonempty, None]
        shift = np.sqrt(((new - centers) ** 2).sum(1)).max()
        centers = new
        if shift < tol:
            break
    return centers


def select_centers(samples, k: int, method: str = "kmeans", seed: int = 0) -> np.ndarray:
    """Pick ``k`` kernel centers from ``samples`` (rows are points)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    n = len(samples)
    if k > n:
        raise ValueError(f"k={k} exceeds number of samples n={n}")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    if method == "kmeans":
        return kmeans(samples, k, rng)
    if method == "random":
        return samples[rng.choice(n, size=k, replace=False)].copy()
    raise ValueError(f"unknown center method {method!r}")


def median_distance(z: np.ndarray, max_points: int = 1000, seed: int = 0) -> float:
    """Median pairwise Euclidean distance over a subsample."""
    if len(z) > max_points:
        z = z[np.random.default_rng(seed).choice(len(z), max_points, replace=False)]
    d = np.sqrt(_sqdist(z, z))
    d = d[np.triu_indices(len(z), 1)]
    med = float(np.median(d)) if len(d) else 1.0
    return med if med > 0 else 1.0


@dataclass(frozen=True)
class KernelCenters:
    centers: np.ndarray  # (k, dim_x + dim_y)
    bandwidth_x: float
    bandwidth_y: float

    def __post_init__(self):
        if len(self.centers) < 1:
            raise ValueError("need at least one center")
        for b in (self.bandwidth_x, self.bandwidth_y):
            if not (np.isfinite(b) and b > 0):
                raise ValueError(f"bandwidth must be positive and finite, got {b}")


@dataclass(frozen=True)
class LscdeModel:
    """Fitted estimator of p(y | x).

    ``x_shift``/``x_scale`` and ``y_shift``/``y_scale`` map raw inputs to
    the space the kernels live in; :func:`conditional_density` returns the
    density with respect to raw ``y``.
    """

    centers: KernelCenters
    alpha: np.ndarray
    dim_x: int
    dim_y: int
    x_shift: np.ndarray = field(default=None)
    x_scale: np.ndarray = field(default=None)
    y_shift: np.ndarray = field(default=None)
    y_scale: np.ndarray = field(default=None)

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=np.float64)
        if np.any(alpha < 0):
            raise ValueError("coefficients must be nonnegative")
        if not np.any(alpha > 0):
            raise DegenerateFitError("degenerate fit: all coefficients are zero")
        object.__setattr__(self, "alpha", alpha)
        for name, dim in (("x", self.dim_x), ("y", self.dim_y)):
            if getattr(self, f"{name}_shift") is None:
                object.__setattr__(self, f"{name}_shift", np.zeros(dim))
            if getattr(self, f"{name}_scale") is None:
                object.__setattr__(self, f"{name}_scale", np.ones(dim))

    @property
    def k(self) -> int:
        return len(self.alpha)

    def scaled(self, c: float) -> "LscdeModel":
        return LscdeModel(self.centers, self.alpha * c, self.dim_x, self.dim_y,
                          self.x_shift, self.x_scale, self.y_shift, self.y_scale)


def _as_2d(a, dim: Optional[int] = None) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a[:, None] if dim in (None, 1) else a[None, :]
    return a


def _gram_y(cy: np.ndarray, sy: float) -> np.ndarray:
    """Integral over y of phi_i(y) phi_j(y) for Gaussian y-kernels."""
    dy = cy.shape[1]
    return (np.pi * sy**2) ** (dy / 2) * np.exp(-_sqdist(cy, cy) / (4 * sy**2))


def _design(X, Y, cx, cy, sx, sy):
    kx = np.exp(-_sqdist(X, cx) / (2 * sx**2))
    ky = np.exp(-_sqdist(Y, cy) / (2 * sy**2))
    return kx, ky


def _solve(H: np.ndarray, h: np.ndarray, lam: float) -> np.ndarray:
    A = H + lam * np.eye(len(H))
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise SingularFitError(f"regularized system is singular (lambda={lam})") from exc
    alpha = np.linalg.solve(L.T, np.linalg.solve(L, h))
    return np.maximum(alpha, 0.0)


def _prepare(X, Y, discrete_x, discrete_y, jitter_cfg, standardize, rng):
    """Jitter discrete columns and compute the affine map to kernel space."""
    X = _as_2d(X).copy()
    Y = _as_2d(Y).copy()
    if len(X) != len(Y):
        raise ValueError(f"|X|={len(X)} != |Y|={len(Y)}")
    maps = []
    for Z, mask in ((X, discrete_x), (Y, discrete_y)):
        mask = np.zeros(Z.shape[1], bool) if mask is None else np.asarray(mask, bool)
        if mask.any():
            Z[:, mask] = jitter(Z[:, mask], jitter_cfg, rng)
        shift = np.zeros(Z.shape[1])
        scale = np.ones(Z.shape[1])
        if standardize:
            cont = ~mask
            shift[cont] = Z[:, cont].mean(0)
            sd = Z[:, cont].std(0)
            scale[cont] = np.where(sd > 0, sd, 1.0)
        maps.append((shift, scale))
    (xs, xc), (ys, yc) = maps
    return (X - xs) / xc, (Y - ys) / yc, xs, xc, ys, yc


def fit_lscde(
    X,
    Y,
    k: int = DEFAULT_K,
    lambda_reg: float = DEFAULT_LAMBDA,
    bandwidths=None,
    seed: int = 0,
    center_method: str = "kmeans",
    discrete_x=None,
    discrete_y=None,
    jitter_cfg: JitterConfig = JitterConfig(),
    standardize: bool = False,
) -> LscdeModel:
    """Fit an LSCDE model of p(Y | X).

    ``bandwidths`` is a ``(sigma_x, sigma_y)`` pair in kernel space, or
    ``None`` for the per-block median-distance heuristic. Columns flagged
    in ``discrete_x``/``discrete_y`` are jittered with fresh noise per
    sample; with ``standardize`` the remaining columns are z-scored.
    """
    if not lambda_reg > 0:
        raise ValueError("lambda_reg must be > 0")
    rng = np.random.default_rng(seed)
    Xs, Ys, xs, xc, ys, yc = _prepare(X, Y, discrete_x, discrete_y, jitter_cfg, standardize, rng)
    n = len(Xs)
    k = min(k, n)
    if n < 1:
        raise ValueError("no samples")
    if bandwidths is None:
        bandwidths = (median_distance(Xs, seed=seed), median_distance(Ys, seed=seed))
    sx, sy = float(bandwidths[0]), float(bandwidths[1])
    Z = np.hstack([Xs, Ys])
    C = select_centers(Z, k, center_method, seed=seed)
    alpha = _fit_alpha(Xs, Ys, C, sx, sy, lambda_reg)
    return LscdeModel(KernelCenters(C, sx, sy), alpha, Xs.shape[1], Ys.shape[1], xs, xc, ys, yc)


def _moments(X, Y, C, sx, sy):
    dx = X.shape[1]
    cx, cy = C[:, :dx], C[:, dx:]
    kx, ky = _design(X, Y, cx, cy, sx, sy)
    n = len(X)
    H = (kx.T @ kx) / n * _gram_y(cy, sy)
    h = (kx * ky).mean(0)
    return H, h


def _fit_alpha(X, Y, C, sx, sy, lam):
    H, h = _moments(X, Y, C, sx, sy)
    alpha = _solve(H, h, lam)
    if not np.any(alpha > 0):
        raise DegenerateFitError("degenerate fit: all coefficients clipped to zero")
    return alpha


def conditional_density(model: LscdeModel, x, y) -> np.ndarray:
    """Normalized estimate of p(y | x) for each row of ``x``/``y``.

    Single points may be passed as 1-D arrays; a scalar is returned then.
    """
    single = (np.ndim(x) <= 1 and np.size(x) == model.dim_x
              and np.ndim(y) <= 1 and np.size(y) == model.dim_y)
    x = _as_2d(x, model.dim_x)
    y = _as_2d(y, model.dim_y)
    if x.shape[1] != model.dim_x or y.shape[1] != model.dim_y:
        raise ValueError(
            f"dimension mismatch: model is ({model.dim_x}, {model.dim_y}), "
            f"got ({x.shape[1]}, {y.shape[1]})"
        )
    if len(x) != len(y):
        if len(x) == 1:
            x = np.repeat(x, len(y), 0)
        elif len(y) == 1:
            y = np.repeat(y, len(x), 0)
        else:
            raise ValueError("x and y row counts differ")
    xs = (x - model.x_shift) / model.x_scale
    ys = (y - model.y_shift) / model.y_scale
    c = model.centers
    cx, cy = c.centers[:, : model.dim_x], c.centers[:, model.dim_x :]
    active = model.alpha > 0
    alpha, cx, cy = model.alpha[active], cx[active], cy[active]
    logkx = -_sqdist(xs, cx) / (2 * c.bandwidth_x**2)
    # rescale by the largest x-kernel per row; it cancels in the ratio
    shift = logkx.max(1, keepdims=True)
    far = shift[:, 0] < -700
    if np.any(far):
        logger.warning("%d queries lie far outside the kernel centers", int(far.sum()))
    wx = alpha * np.exp(logkx - shift)
    ky = np.exp(-_sqdist(ys, cy) / (2 * c.bandwidth_y**2))
    numer = (wx * ky).sum(1)
    denom = (2 * np.pi * c.bandwidth_y**2) ** (model.dim_y / 2) * wx.sum(1)
    low = denom < DENOMINATOR_FLOOR
    if np.any(low):
        logger.warning("%d density denominators floored at %g", int(low.sum()), DENOMINATOR_FLOOR)
        denom = np.maximum(denom, DENOMINATOR_FLOOR)
    out = numer / denom / np.prod(model.y_scale)
    return float(out[0]) if single and len(out) == 1 else out


def unnormalized_density(model: LscdeModel, x, y) -> np.ndarray:
    """The raw kernel sum r(x, y) in kernel space (nonnegative)."""
    x = (_as_2d(x, model.dim_x) - model.x_shift) / model.x_scale
    y = (_as_2d(y, model.dim_y) - model.y_shift) / model.y_scale
    c = model.centers
    kx, ky = _design(x, y, c.centers[:, : model.dim_x], c.centers[:, model.dim_x :],
                     c.bandwidth_x, c.bandwidth_y)
    return (kx * ky) @ model.alpha


def _expand_bandwidths(grid):
    grid = list(grid)
    if grid and np.ndim(grid[0]) == 0:
        return [(float(a), float(b)) for a, b in itertools.product(grid, grid)]
    return [(float(a), float(b)) for a, b in grid]


def cross_validate(
    X,
    Y,
    k_grid: Sequence[int],
    lambda_grid: Sequence[float],
    bandwidth_grid,
    folds: int = 5,
    seed: int = 0,
    center_method: str = "kmeans",
    discrete_x=None,
    discrete_y=None,
    jitter_cfg: JitterConfig = JitterConfig(),
    standardize: bool = False,
) -> dict:
    """Grid search minimizing the held-out LSCDE squared-error criterion.

    ``bandwidth_grid`` holds ``(sigma_x, sigma_y)`` pairs, or scalars that
    are crossed with themselves. Returns the chosen ``k``, ``lambda_reg``
    and ``bandwidths`` plus the score table.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    bw = _expand_bandwidths(bandwidth_grid)
    if not k_grid or not lambda_grid or not bw:
        raise ValueError("empty hyperparameter grid")
    rng = np.random.default_rng(seed)
    Xs, Ys, *_ = _prepare(X, Y, discrete_x, discrete_y, jitter_cfg, standardize, rng)
    n = len(Xs)
    fold_of = rng.permutation(np.arange(n) % folds)
    Z = np.hstack([Xs, Ys])
    scores = {}
    for f in range(folds):
        tr, te = fold_of != f, fold_of == f
        for k in k_grid:
            kk = min(k, int(tr.sum()))
            C = select_centers(Z[tr], kk, center_method, seed=seed + f)
            for sx, sy in bw:
                Htr, htr = _moments(Xs[tr], Ys[tr], C, sx, sy)
                Hte, hte = _moments(Xs[te], Ys[te], C, sx, sy)
                for lam in lambda_grid:
                    try:
                        alpha = _solve(Htr, htr, lam)
                    except SingularFitError:
                        score = np.inf
                    else:
                        score = 0.5 * alpha @ Hte @ alpha - hte @ alpha
                    key = (k, lam, sx, sy)
                    scores[key] = scores.get(key, 0.0) + score / folds
    best = min(scores, key=lambda key: (scores[key], key))
    k, lam, sx, sy = best
    return {"k": k, "lambda_reg": lam, "bandwidths": (sx, sy), "scores": scores}


def save_model(model: LscdeModel, path) -> None:
    from .cmdp import atomic_write_text

    def vec(a):
        return ",".join(format(float(v), ".17g") for v in a)

    c = model.centers
    lines = [
        f"# dim_x={model.dim_x}",
        f"# dim_y={model.dim_y}",
        f"# k={model.k}",
        f"# bandwidth_x={c.bandwidth_x!r}",
        f"# bandwidth_y={c.bandwidth_y!r}",
        f"# x_shift={vec(model.x_shift)}",
        f"# x_scale={vec(model.x_scale)}",
        f"# y_shift={vec(model.y_shift)}",
        f"# y_scale={vec(model.y_scale)}",
        "# columns=" + ",".join([f"cx{i}" for i in range(model.dim_x)]
                                + [f"cy{i}" for i in range(model.dim_y)] + ["alpha"]),
    ]
    for row, a in zip(c.centers, model.alpha):
        lines.append(vec(list(row) + [a]))
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_model(path) -> LscdeModel:
    header, rows = {}, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                header[key] = value
            else:
                rows.append([float(v) for v in line.split(",")])
    data = np.array(rows)

    def vec(key):
        return np.array([float(v) for v in header[key].split(",")])

    dx, dy = int(header["dim_x"]), int(header["dim_y"])
    if data.shape[1] != dx + dy + 1:
        raise ValueError("model file columns do not match declared dimensions")
    centers = KernelCenters(data[:, :-1], float(header["bandwidth_x"]), float(header["bandwidth_y"]))
    return LscdeModel(centers, data[:, -1], dx, dy, vec("x_shift"), vec("x_scale"),
                      vec("y_shift"), vec("y_scale"))
