"""Dense tensors with reverse-mode automatic differentiation.

numpy owns the buffers; every differentiable operation appends a node to a
tape (parents + a vector-Jacobian closure) so `backward` can sweep gradients
to the leaves in one fixed topological order.  Buffers are float64
throughout, values are checked for finiteness after every operation, and
tensors are treated as immutable once built, so a finished tensor is safe to
share across threads while the tape of a single loss stays on one thread.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateVectorError, NumericError, ShapeError

Axis = "int | tuple[int, ...] | None"

_grad_enabled = [True]


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward values only)."""
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {what}")


class Tensor:
    """A finite float64 array plus an optional record of how it was made."""

    __slots__ = ("data", "grad", "needs_grad", "_parents", "_vjp")

    def __init__(self, data, needs_grad: bool = False, _parents=(), _vjp=None):
        arr = np.asarray(data, dtype=np.float64)
        _require_finite(arr, "tensor construction")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.needs_grad = needs_grad
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._vjp: Callable | None = _vjp

    # -- book-keeping -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, needs_grad={self.needs_grad})"

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method sugar for the common reductions ----------------------------

    def sum(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis: Axis = None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, *shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    """A leaf tensor that gradients should reach."""
    return Tensor(data, needs_grad=True)


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    _require_finite(data, op)
    if _grad_enabled[-1] and any(p.needs_grad for p in parents):
        return Tensor(data, needs_grad=True, _parents=parents, _vjp=vjp)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _norm_axis(axis: Axis, ndim: int):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


# -- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), vjp, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), vjp, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(out, (a, b), vjp, "div")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out = a.data ** p

    def vjp(g):
        return (g * p * a.data ** (p - 1.0),)

    return _node(out, (a,), vjp, "power")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def vjp(g):
        return (g * out,)

    return _node(out, (a,), vjp, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    out = np.log(a.data)

    def vjp(g):
        return (g / a.data,)

    return _node(out, (a,), vjp, "log")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * 0.5 / out,)

    return _node(out, (a,), vjp, "sqrt")


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def vjp(g):
        return (g * (a.data > 0.0),)

    return _node(out, (a,), vjp, "relu")


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor) elementwise; clamped entries get zero gradient."""
    a = as_tensor(a)
    out = np.maximum(a.data, floor)

    def vjp(g):
        return (g * (a.data > floor),)

    return _node(out, (a,), vjp, "clamp_min")


# -- reductions and shape moves ----------------------------------------------


def tsum(a, axis: Axis = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=ax, keepdims=keepdims)

    def vjp(g):
        if ax is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, ax)
        return (np.broadcast_to(gk, a.shape).copy(),)

    return _node(out, (a,), vjp, "sum")


def tmean(a, axis: Axis = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    ax = _norm_axis(axis, a.ndim)
    count = a.size if ax is None else int(np.prod([a.shape[i] for i in ax]))
    out = a.data.mean(axis=ax, keepdims=keepdims)

    def vjp(g):
        if ax is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, ax)
        return (np.broadcast_to(gk / count, a.shape).copy(),)

    return _node(out, (a,), vjp, "mean")


def reshape(a, *shape) -> Tensor:
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _node(out, (a,), vjp, "reshape")


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _node(np.array(out, copy=True), (a,), vjp, "getitem")


def gather_rows(a, rows: np.ndarray) -> Tensor:
    """Pick a[i, rows[i]] for every row i of a 2-D tensor."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("gather_rows expects a 2-D tensor")
    idx = (np.arange(a.shape[0]), np.asarray(rows, dtype=np.intp))
    out = a.data[idx]

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _node(out, (a,), vjp, "gather_rows")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _node(out, tuple(ts), vjp, "stack")


def row_replace(base, rows: np.ndarray, replacement) -> Tensor:
    """Copy `base` with rows[i] overwritten by replacement[i]."""
    base, replacement = as_tensor(base), as_tensor(replacement)
    rows = np.asarray(rows, dtype=np.intp)
    out = base.data.copy()
    out[rows] = replacement.data

    def vjp(g):
        gb = g.copy()
        gb[rows] = 0.0
        return gb, g[rows]

    return _node(out, (base, replacement), vjp, "row_replace")


def einsum2(eq: str, a, b) -> Tensor:
    """Two-operand einsum with reverse-mode gradients.

    Every index must be a plain letter appearing at most once per operand,
    and each operand's indices must be recoverable from the output plus the
    other operand (true for all contractions used in this package).
    """
    a, b = as_tensor(a), as_tensor(b)
    ins, out_spec = eq.split("->")
    a_spec, b_spec = ins.split(",")
    for spec, t in ((a_spec, a), (b_spec, b)):
        if len(set(spec)) != len(spec) or len(spec) != t.ndim:
            raise ShapeError(f"bad einsum spec {spec!r} for shape {t.shape}")
    if not set(a_spec) <= set(out_spec) | set(b_spec):
        raise ShapeError(f"einsum {eq!r}: cannot differentiate first operand")
    if not set(b_spec) <= set(out_spec) | set(a_spec):
        raise ShapeError(f"einsum {eq!r}: cannot differentiate second operand")
    out = np.einsum(eq, a.data, b.data, optimize=True)

    def vjp(g):
        ga = np.einsum(f"{out_spec},{b_spec}->{a_spec}", g, b.data, optimize=True)
        gb = np.einsum(f"{out_spec},{a_spec}->{b_spec}", g, a.data, optimize=True)
        return ga, gb

    return _node(out, (a, b), vjp, "einsum2")


# -- convolution and pooling ---------------------------------------------------


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation convolution on NHWC input (or a single HWC map).

    kernel has shape (kh, kw, c_in, c_out); output spatial size is
    floor((H + 2p - k) / stride) + 1 per side.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects NHWC input and (kh,kw,cin,cout) kernel")
    n, h, w, cin = xd.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, got {cin}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError("spatial dims after padding smaller than the kernel")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    out = np.zeros((n * ho * wo, cout))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i:i + (ho - 1) * stride + 1:stride,
                       j:j + (wo - 1) * stride + 1:stride, :]
            out += patch.reshape(-1, cin) @ kernel.data[i, j]
    out = out.reshape(n, ho, wo, cout)

    def vjp(g):
        g4 = g.reshape(n, ho, wo, cout)
        gk = np.zeros_like(kernel.data)
        gxp = np.zeros_like(xp)
        gflat = g4.reshape(-1, cout)
        for i in range(kh):
            for j in range(kw):
                sl = (slice(None),
                      slice(i, i + (ho - 1) * stride + 1, stride),
                      slice(j, j + (wo - 1) * stride + 1, stride),
                      slice(None))
                patch = xp[sl]
                gk[i, j] = patch.reshape(-1, cin).T @ gflat
                gxp[sl] += (gflat @ kernel.data[i, j].T).reshape(patch.shape)
        gx = gxp[:, padding:padding + h, padding:padding + w, :]
        if squeeze:
            gx = gx[0]
        return gx, gk

    final = out[0] if squeeze else out
    return _node(final, (x, kernel), vjp, "conv2d")


def avg_pool2(x) -> Tensor:
    """2x downsample of NHWC by averaging non-overlapping 2x2 windows."""
    x = as_tensor(x)
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError("avg_pool2 needs even spatial dims")
    return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def avg_pool_spatial(x) -> Tensor:
    """Per-channel spatial mean: (H, W, C) -> (C,) or (N, H, W, C) -> (N, C)."""
    x = as_tensor(x)
    if x.ndim == 3:
        return x.mean(axis=(0, 1))
    if x.ndim == 4:
        return x.mean(axis=(1, 2))
    raise ShapeError("avg_pool_spatial expects a rank-3 or rank-4 tensor")


# -- softmax family -------------------------------------------------------------


def softmax(t, axis: int) -> Tensor:
    """Stable softmax along one axis (max is subtracted before exponentiation)."""
    t = as_tensor(t)
    if not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for rank {t.ndim}")
    shift = t - Tensor(t.data.max(axis=axis, keepdims=True))
    e = exp(shift)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(t, axis: int) -> Tensor:
    t = as_tensor(t)
    shift = t - Tensor(t.data.max(axis=axis, keepdims=True))
    return shift - log(exp(shift).sum(axis=axis, keepdims=True))


def cosine(a, b) -> Tensor:
    """Cosine similarity of two nonzero vectors.

    Raises DegenerateVectorError for a zero-norm input; callers that want a
    silent 0 (the episodic scorer does) handle that themselves.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError("cosine expects two equal-length vectors")
    na = float(np.linalg.norm(a.data))
    nb = float(np.linalg.norm(b.data))
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine of a zero-norm vector")
    dot = (a * b).sum()
    return dot / (sqrt((a * a).sum()) * sqrt((b * b).sum()))


# -- reverse sweep ---------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    """Post-order over the tape; raises if the record were ever cyclic."""
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = open, 2 = done
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        t, pi = stack.pop()
        if pi == 0:
            s = state.get(id(t), 0)
            if s == 2:
                continue
            assert s != 1, "cycle in differentiation record"
            state[id(t)] = 1
        if pi < len(t._parents):
            stack.append((t, pi + 1))
            child = t._parents[pi]
            child_state = state.get(id(child), 0)
            assert child_state != 1, "cycle in differentiation record"
            if child_state == 0:
                stack.append((child, 0))
        else:
            state[id(t)] = 2
            order.append(t)
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep; leaves touched by the loss receive `.grad`."""
    if loss.size != 1:
        raise ShapeError("backward needs a scalar loss")
    order = _topo(loss)
    for t in order:
        t.grad = None
    loss.grad = np.ones_like(loss.data)
    for t in reversed(order):
        if t._vjp is None or t.grad is None:
            continue
        grads = t._vjp(t.grad)
        for p, g in zip(t._parents, grads):
            if g is None or not (p.needs_grad or p._vjp is not None):
                continue
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            p.grad += g


def zero_grads(params) -> None:
    for p in params.values() if isinstance(params, dict) else params:
        p.grad = None


def gradients(loss: Tensor, params: dict) -> dict:
    """Gradient of `loss` for every named parameter; untouched ones get zeros."""
    zero_grads(params)
    backward(loss)
    return {name: (p.grad if p.grad is not None else np.zeros_like(p.data))
            for name, p in params.items()}


# -- finite-difference checking ----------------------------------------------------


@dataclass
class GradReport:
    """Reverse-mode vs central-difference comparison for one scalar function."""

    max_rel_errors: list
    max_abs_errors: list
    tolerance: float
    abs_floor: float

    @property
    def passed(self) -> bool:
        return all(rel <= self.tolerance or ab <= self.abs_floor
                   for rel, ab in zip(self.max_rel_errors, self.max_abs_errors))

    def summary(self) -> str:
        worst_rel = max(self.max_rel_errors) if self.max_rel_errors else 0.0
        worst_abs = max(self.max_abs_errors) if self.max_abs_errors else 0.0
        verdict = "pass" if self.passed else "FAIL"
        return f"{verdict} max_rel={worst_rel:.3e} max_abs={worst_abs:.3e}"


def grad_check(f, inputs: Sequence[np.ndarray], eps: float = 1e-5,
               tolerance: float = 1e-4, abs_floor: float = 1e-7) -> GradReport:
    """Compare reverse-mode gradients of f against central differences.

    f maps a list of Tensors to a scalar Tensor and must be deterministic;
    inputs are the float arrays to perturb, one report entry per input.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    arrays = [np.asarray(x, dtype=np.float64) for x in inputs]
    leaves = [parameter(x.copy()) for x in arrays]
    out = f(leaves)
    if out.size != 1:
        raise ShapeError("grad_check target must return a scalar")
    zero_grads(leaves)
    backward(out)
    analytic = [lf.grad if lf.grad is not None else np.zeros_like(lf.data)
                for lf in leaves]

    def probe(k: int, flat_index: int, delta: float) -> float:
        shifted = [x.copy() for x in arrays]
        shifted[k].flat[flat_index] += delta
        with no_grad():
            val = f([Tensor(s) for s in shifted])
        v = val.item()
        if not np.isfinite(v):
            raise NumericError("non-finite value at finite-difference probe")
        return v

    max_rel, max_abs = [], []
    for k, x in enumerate(arrays):
        worst_rel = worst_abs = 0.0
        for flat in range(x.size):
            num = (probe(k, flat, eps) - probe(k, flat, -eps)) / (2.0 * eps)
            ana = analytic[k].flat[flat]
            ab = abs(ana - num)
            # coordinates already inside the absolute floor do not count
            # toward the relative error (their denominator is pure noise)
            rel = ab / max(abs(ana), abs(num)) if ab > abs_floor else 0.0
            worst_rel = max(worst_rel, rel)
            worst_abs = max(worst_abs, ab)
        max_rel.append(worst_rel)
        max_abs.append(worst_abs)
    return GradReport(max_rel, max_abs, tolerance, abs_floor)
