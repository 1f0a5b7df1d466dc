"""Small numpy MLPs with hand-written backprop.

Parameters live in one flat float64 vector; per-layer weight and bias
arrays are views into it, so optimizers and target copies work on the
flat vector directly.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .cmdp import N_ACTIONS, atomic_write_text

DEFAULT_SIZES = (3, 64, 64, N_ACTIONS)


def _n_params(sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def _layer_views(flat: np.ndarray, sizes: Sequence[int]):
    views, pos = [], 0
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = flat[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = flat[pos : pos + fan_out]
        pos += fan_out
        views.append((W, b))
    return views


def init_params(sizes: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    flat = np.empty(_n_params(sizes))
    for (W, b), fan_in in zip(_layer_views(flat, sizes), sizes[:-1]):
        bound = 1.0 / np.sqrt(fan_in)
        W[...] = rng.uniform(-bound, bound, W.shape)
        b[...] = rng.uniform(-bound, bound, b.shape)
    return flat


def mlp_forward(params: np.ndarray, sizes: Sequence[int], x: np.ndarray, keep: bool = False):
    """tanh hidden layers, linear output. Returns ``(out, cache)``."""
    h = np.asarray(x, dtype=np.float64)
    acts = [h]
    views = _layer_views(params, sizes)
    for i, (W, b) in enumerate(views):
        h = h @ W + b
        if i < len(views) - 1:
            h = np.tanh(h)
        acts.append(h)
    return h, (acts if keep else None)


def mlp_backward(params: np.ndarray, sizes: Sequence[int], cache, dout: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(dout * out)`` with respect to the flat parameters."""
    grad = np.zeros_like(params)
    gviews = _layer_views(grad, sizes)
    views = _layer_views(params, sizes)
    delta = dout
    for i in range(len(views) - 1, -1, -1):
        W, _ = views[i]
        gW, gb = gviews[i]
        a_in = cache[i]
        gW[...] = a_in.T @ delta
        gb[...] = delta.sum(0)
        if i > 0:
            delta = (delta @ W.T) * (1.0 - a_in**2)
    return grad


class MLP:
    """Feed-forward network holding its flat parameter vector."""

    def __init__(self, sizes: Sequence[int] = DEFAULT_SIZES, rng: Optional[np.random.Generator] = None,
                 params: Optional[np.ndarray] = None):
        self.sizes = tuple(int(s) for s in sizes)
        if params is None:
            params = init_params(self.sizes, rng if rng is not None else np.random.default_rng(0))
        params = np.array(params, dtype=np.float64)
        if params.shape != (_n_params(self.sizes),):
            raise ValueError(f"expected {_n_params(self.sizes)} parameters, got {params.shape}")
        self.params = params

    @property
    def n_params(self) -> int:
        return len(self.params)

    def __call__(self, x, params: Optional[np.ndarray] = None) -> np.ndarray:
        return mlp_forward(self.params if params is None else params, self.sizes, x)[0]

    def forward(self, x, params: Optional[np.ndarray] = None):
        return mlp_forward(self.params if params is None else params, self.sizes, x, keep=True)

    def backward(self, cache, dout, params: Optional[np.ndarray] = None) -> np.ndarray:
        return mlp_backward(self.params if params is None else params, self.sizes, cache, dout)


class QApproximator(MLP):
    """State -> one value per action, with a lagged target copy."""

    def __init__(self, sizes: Sequence[int] = DEFAULT_SIZES, rng: Optional[np.random.Generator] = None,
                 params: Optional[np.ndarray] = None):
        super().__init__(sizes, rng, params)
        self.target_params = self.params.copy()

    def target(self, x) -> np.ndarray:
        return mlp_forward(self.target_params, self.sizes, x)[0]

    def sync_target(self) -> None:
        self.target_params[...] = self.params

    def greedy(self, s) -> np.ndarray:
        return np.argmax(self(np.atleast_2d(s)), axis=1)


def forward(q: MLP, s) -> np.ndarray:
    """Action values for one state (or a batch)."""
    s = np.asarray(s, dtype=np.float64)
    out = q(np.atleast_2d(s))
    return out[0] if s.ndim == 1 else out


def sync_target(q: QApproximator) -> None:
    q.sync_target()


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


class PolicyHead(MLP):
    """Categorical policy over the actions via softmax of MLP logits."""

    def probs(self, s) -> np.ndarray:
        return softmax(self(np.atleast_2d(s)))

    def greedy(self, s) -> np.ndarray:
        return np.argmax(self(np.atleast_2d(s)), axis=1)


class Adam:
    def __init__(self, n: int, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad * grad
        mhat = self.m / (1 - self.b1**self.t)
        vhat = self.v / (1 - self.b2**self.t)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class SGD:
    def __init__(self, n: int, lr: float = 3e-4):
        self.lr = lr

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        params -= self.lr * grad


def make_optimizer(name: str, n: int, lr: float):
    if name == "adam":
        return Adam(n, lr)
    if name == "sgd":
        return SGD(n, lr)
    raise ValueError(f"unknown optimizer {name!r}")


def save_params(net: MLP, path, kind: str = "q") -> None:
    lines = [f"# kind={kind}", "# sizes=" + ",".join(map(str, net.sizes)), f"# n={net.n_params}"]
    lines += [format(float(v), ".17g") for v in net.params]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_params(path) -> MLP:
    header, values = {}, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                header[key] = value
            elif line:
                values.append(float(line))
    sizes = tuple(int(v) for v in header["sizes"].split(","))
    cls = PolicyHead if header.get("kind") == "policy" else QApproximator
    return cls(sizes, params=np.array(values))
