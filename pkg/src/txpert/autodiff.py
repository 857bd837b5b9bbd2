"""Minimal reverse-mode autodiff over 2-D float64 numpy arrays.

Everything is a matrix: vectors are 1xN rows, scalars are 1x1. Each op
records a backward closure; ``backward`` replays them in reverse
topological order. Exactness is checked against central finite
differences via ``grad_check``.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "backward",
    "make_rng",
    "kaiming_init",
    "add",
    "sub",
    "mul",
    "matmul",
    "scale",
    "leaky_relu",
    "concat_cols",
    "slice_cols",
    "gather_rows",
    "segment_sum",
    "segment_softmax",
    "softmax_rows",
    "row_sum",
    "mse_loss",
    "grad_check",
    "Optimizer",
]


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; identical seed gives an identical stream."""
    return np.random.Generator(np.random.PCG64(seed))


def _as_matrix(value) -> np.ndarray:
    v = np.asarray(value, dtype=np.float64)
    if v.ndim == 0:
        v = v.reshape(1, 1)
    elif v.ndim == 1:
        v = v.reshape(1, -1)
    elif v.ndim != 2:
        raise ValueError(f"expected at most 2 dimensions, got shape {v.shape}")
    return v


class Tensor:
    """Node in the autodiff graph holding a 2-D float64 value.

    Leaf tensors (user data, parameters) reject NaN/Inf at construction;
    op outputs skip the scan for speed, and non-finite values surface at
    the loss (checked by mse_loss and the optimizer).
    """

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(self, value, _parents=(), _backward=None):
        v = _as_matrix(value)
        if not _parents and not np.all(np.isfinite(v)):
            raise ValueError("tensor contains NaN or Inf")
        self.value = v
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"


class Parameter(Tensor):
    """Trainable leaf tensor with a name for checkpoints and diagnostics."""

    __slots__ = ("name",)

    def __init__(self, value, name: str):
        super().__init__(value)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name}, shape={self.value.shape})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad over the whole graph."""
    if loss.value.size != 1:
        raise ValueError("backward expects a scalar loss")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.value + b.value, (a, b))

    def bwd(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(g, b.value.shape))

    out._backward = bwd
    return out


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.value - b.value, (a, b))

    def bwd(g):
        _accum(a, _unbroadcast(g, a.value.shape))
        _accum(b, _unbroadcast(-g, b.value.shape))

    out._backward = bwd
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.value * b.value, (a, b))

    def bwd(g):
        _accum(a, _unbroadcast(g * b.value, a.value.shape))
        _accum(b, _unbroadcast(g * a.value, b.value.shape))

    out._backward = bwd
    return out


def scale(a, c: float) -> Tensor:
    a = _wrap(a)
    c = float(c)
    out = Tensor(a.value * c, (a,))

    def bwd(g):
        _accum(a, g * c)

    out._backward = bwd
    return out


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.value.shape[1] != b.value.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.value.shape} @ {b.value.shape}")
    out = Tensor(a.value @ b.value, (a, b))

    def bwd(g):
        _accum(a, g @ b.value.T)
        _accum(b, a.value.T @ g)

    out._backward = bwd
    return out


def linear(x, weight, bias=None) -> Tensor:
    """Affine map x @ W (+ b); W is (in, out), b is (1, out)."""
    y = matmul(x, weight)
    if bias is not None:
        y = add(y, bias)
    return y


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0,1), got {slope}")
    x = _wrap(x)
    factor = np.where(x.value >= 0.0, 1.0, slope)
    out = Tensor(x.value * factor, (x,))

    def bwd(g):
        _accum(x, g * factor)

    out._backward = bwd
    return out


def concat_cols(tensors) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.value for t in tensors], axis=1), tuple(tensors))
    widths = [t.value.shape[1] for t in tensors]
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            _accum(t, g[:, lo:hi])

    out._backward = bwd
    return out


def slice_cols(x, lo: int, hi: int) -> Tensor:
    x = _wrap(x)
    out = Tensor(x.value[:, lo:hi], (x,))

    def bwd(g):
        gx = np.zeros_like(x.value)
        gx[:, lo:hi] = g
        _accum(x, gx)

    out._backward = bwd
    return out


def _scatter_add_rows(target: np.ndarray, index: np.ndarray, rows: np.ndarray) -> None:
    """target[index] += rows via one flat bincount (much faster than ufunc.at)."""
    n, c = target.shape
    flat = (index[:, None] * c + np.arange(c)).ravel()
    target += np.bincount(flat, weights=rows.ravel(), minlength=n * c).reshape(n, c)


def gather_rows(x, index) -> Tensor:
    x = _wrap(x)
    index = np.asarray(index, dtype=np.intp)
    out = Tensor(x.value[index], (x,))

    def bwd(g):
        gx = np.zeros_like(x.value)
        _scatter_add_rows(gx, index, g)
        _accum(x, gx)

    out._backward = bwd
    return out


def segment_sum(x, segments, num_segments: int) -> Tensor:
    """Scatter-add rows of x into num_segments output rows."""
    x = _wrap(x)
    segments = np.asarray(segments, dtype=np.intp)
    sorted_segments = segments.size == 0 or bool(np.all(np.diff(segments) >= 0))
    val = np.zeros((num_segments, x.value.shape[1]))
    if sorted_segments and segments.size:
        starts = np.searchsorted(segments, np.arange(num_segments))
        present = np.ones(num_segments, dtype=bool)
        present[:-1] = starts[:-1] < starts[1:]
        present[-1] = starts[-1] < segments.size
        sums = np.add.reduceat(x.value, starts[present], axis=0)
        val[present] = sums
    elif segments.size:
        _scatter_add_rows(val, segments, x.value)
    out = Tensor(val, (x,))

    def bwd(g):
        _accum(x, g[segments])

    out._backward = bwd
    return out


def _segment_layout(segments: np.ndarray, num_segments: int):
    counts = np.bincount(segments, minlength=num_segments)
    if num_segments > 0 and np.any(counts == 0):
        empty = int(np.flatnonzero(counts == 0)[0])
        raise ValueError(f"segment {empty} is empty")
    starts = np.zeros(num_segments, dtype=np.intp)
    np.cumsum(counts[:-1], out=starts[1:])
    return starts, counts


def segment_softmax(scores, segments, num_segments: int | None = None) -> Tensor:
    """Column-wise softmax within contiguous groups of rows.

    ``segments`` must be sorted ascending; every id in [0, num_segments)
    must appear at least once. Stabilized by per-segment max subtraction.
    """
    scores = _wrap(scores)
    segments = np.asarray(segments, dtype=np.intp)
    if segments.size != scores.value.shape[0]:
        raise ValueError("one segment id per score row required")
    if segments.size == 0:
        raise ValueError("segment 0 is empty")
    if np.any(np.diff(segments) < 0):
        raise ValueError("segment ids must be sorted ascending")
    if num_segments is None:
        num_segments = int(segments[-1]) + 1
    starts, counts = _segment_layout(segments, num_segments)

    x = scores.value
    m = np.maximum.reduceat(x, starts, axis=0)
    e = np.exp(x - np.repeat(m, counts, axis=0))
    den = np.add.reduceat(e, starts, axis=0)
    y = e / np.repeat(den, counts, axis=0)
    out = Tensor(y, (scores,))

    def bwd(g):
        dot = np.add.reduceat(y * g, starts, axis=0)
        _accum(scores, y * (g - np.repeat(dot, counts, axis=0)))

    out._backward = bwd
    return out


def softmax_rows(x) -> Tensor:
    """Row-wise stabilized softmax."""
    x = _wrap(x)
    m = x.value.max(axis=1, keepdims=True)
    e = np.exp(x.value - m)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y, (x,))

    def bwd(g):
        dot = (y * g).sum(axis=1, keepdims=True)
        _accum(x, y * (g - dot))

    out._backward = bwd
    return out


def row_sum(x) -> Tensor:
    """Sum along columns, keeping a (N,1) shape."""
    x = _wrap(x)
    out = Tensor(x.value.sum(axis=1, keepdims=True), (x,))

    def bwd(g):
        _accum(x, np.broadcast_to(g, x.value.shape).copy())

    out._backward = bwd
    return out


def mse_loss(pred, target) -> Tensor:
    """Mean squared error over all entries (per-sample mean, batch mean)."""
    pred, target = _wrap(pred), _wrap(target)
    if pred.value.shape != target.value.shape:
        raise ValueError(f"mse shape mismatch {pred.value.shape} vs {target.value.shape}")
    diff = pred.value - target.value
    value = np.mean(diff**2)
    if not np.isfinite(value):
        raise ValueError("non-finite loss")
    out = Tensor(value, (pred, target))

    def bwd(g):
        gd = g * 2.0 * diff / diff.size
        _accum(pred, gd)
        _accum(target, -gd)

    out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# initialization, checking, optimization


def kaiming_init(rows: int, cols: int, fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """Normal init with std sqrt(2/fan_in)."""
    if rows < 1 or cols < 1:
        raise ValueError(f"non-positive dimensions ({rows}, {cols})")
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(rows, cols))


def grad_check(loss_fn, params, step: float = 1e-5, atol: float = 1e-7) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    loss_fn rebuilds the graph from the live Parameter objects on every
    call. Relative error uses denominator max(|a|, |b|, 1e-8). Entries
    where both sides sit below atol are counted as equal: central
    differences of a mathematically-zero gradient only produce float
    cancellation noise, which must not read as a mismatch.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.value).all():
        raise FloatingPointError("non-finite loss at probe point")
    backward(loss)
    analytic = [np.zeros_like(p.value) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            f_plus = loss_fn().item()
            flat[i] = orig - step
            f_minus = loss_fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            if max(abs(numeric), abs(gflat[i])) < atol:
                continue
            err = abs(numeric - gflat[i]) / max(abs(numeric), abs(gflat[i]), 1e-8)
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst


class Optimizer:
    """Adam (bias-corrected) by default; mode='sgd' for plain descent.

    Gradients are zeroed after each step; a non-finite gradient aborts
    the step before any parameter is touched.
    """

    def __init__(self, params, learning_rate: float = 1e-3, mode: str = "adam",
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if mode not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer mode {mode!r}")
        self.params = list(params)
        self.lr = float(learning_rate)
        self.mode = mode
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        grads = []
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.value)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter {p.name!r}")
            grads.append(g)
        if self.mode == "sgd":
            for p, g in zip(self.params, grads):
                p.value -= self.lr * g
        else:
            self.t += 1
            bc1 = 1.0 - self.beta1**self.t
            bc2 = 1.0 - self.beta2**self.t
            for p, g, m, v in zip(self.params, grads, self._m, self._v):
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                p.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        for p in self.params:
            p.grad = None
