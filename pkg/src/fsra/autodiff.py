"""Dense float tensors with reverse-mode automatic differentiation.

Just enough operator coverage to express a small vision transformer,
per-region classification heads, and metric losses. Arrays are numpy,
the tape and every backward rule are local to this module. The tape is
single-use: it is consumed and cleared by ``backward``, so a second
backward without re-running the forward pass is rejected.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32
LAYER_NORM_EPS = 1e-6

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """N-d float array, optionally tracked for gradients.

    ``data`` is immutable by convention once the tensor has entered the
    graph; only ``grad`` is written to, by ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; all routing goes through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def transpose(self, axes=None) -> "Tensor":
        return transpose(self, axes)


def parameter(data, name: str | None = None, dtype=DEFAULT_DTYPE) -> Tensor:
    """Leaf tensor that participates in gradient accumulation."""
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


@dataclass
class _Node:
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Execution-ordered record of differentiable ops.

    Execution order is topological by construction: an op is recorded
    only after its inputs exist.
    """

    nodes: list = field(default_factory=list)
    output_ids: set = field(default_factory=set)
    consumed: bool = False


_tape = Tape()
_grad_enabled = True


def active_tape() -> Tape:
    return _tape


def reset_tape() -> Tape:
    global _tape
    _tape = Tape()
    return _tape


@contextlib.contextmanager
def no_grad():
    """Disable recording; outputs inside the block are constants."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def apply_op(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Record one differentiable op on the active tape.

    ``backward`` maps the upstream gradient to one gradient array (or
    None) per input, in order. Exposed so other modules can define ops
    with custom gradients.
    """
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        _tape.nodes.append(_Node(tuple(inputs), out, backward))
        _tape.output_ids.add(id(out))
    return out


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every tensor reachable from ``root``.

    Consumes and clears the active tape; call the forward pass again
    before the next backward.
    """
    if root.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.shape}")
    tape = _tape
    if id(root) not in tape.output_ids:
        raise ValueError(
            "root is not an output of the active tape "
            "(the tape is cleared after each backward; re-run the forward pass)"
        )
    root.grad = np.ones_like(root.data)
    for node in reversed(tape.nodes):
        up = node.output.grad
        if up is None:
            continue
        grads = node.backward(up)
        for tensor, g in zip(node.inputs, grads):
            if g is None or not tensor.requires_grad:
                continue
            if g.dtype != tensor.dtype:
                g = g.astype(tensor.dtype)
            # fresh arrays throughout: accumulation reallocates, never mutates
            tensor.grad = g if tensor.grad is None else tensor.grad + g
    tape.consumed = True
    tape.nodes.clear()
    tape.output_ids.clear()
    reset_tape()


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def astensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, ext in enumerate(shape):
        if ext == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _normalize_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for ndim {ndim}")
    return axis % ndim


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a = astensor(a, b if isinstance(b, Tensor) else None)
    b = astensor(b, a)
    out = a.data + b.data

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return apply_op(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a = astensor(a, b if isinstance(b, Tensor) else None)
    b = astensor(b, a)
    out = a.data - b.data

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return apply_op(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a = astensor(a, b if isinstance(b, Tensor) else None)
    b = astensor(b, a)
    out = a.data * b.data

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return apply_op(out, (a, b), bw)


def div(a, b) -> Tensor:
    a = astensor(a, b if isinstance(b, Tensor) else None)
    b = astensor(b, a)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = (_unbroadcast(-g * a.data / (b.data * b.data), b.shape)
              if b.requires_grad else None)
        return ga, gb

    return apply_op(out, (a, b), bw)


def neg(x: Tensor) -> Tensor:
    x = astensor(x)
    return apply_op(-x.data, (x,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a = astensor(a)
    b = astensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise ValueError(f"matmul batch extents incompatible: {a.shape} @ {b.shape}") from exc
    out = a.data @ b.data

    def bw(g):
        ga = (_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
              if a.requires_grad else None)
        gb = (_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
              if b.requires_grad else None)
        return ga, gb

    return apply_op(out, (a, b), bw)


# ---------------------------------------------------------------------------
# pointwise nonlinearities


def relu(x: Tensor) -> Tensor:
    x = astensor(x)
    mask = x.data > 0
    return apply_op(np.where(mask, x.data, 0), (x,), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) gaussian error linear unit."""
    x = astensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return apply_op(out.astype(x.dtype), (x,), bw)


def exp(x: Tensor) -> Tensor:
    x = astensor(x)
    out = np.exp(x.data)
    return apply_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    x = astensor(x)
    return apply_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    x = astensor(x)
    out = np.sqrt(x.data)
    return apply_op(out, (x,), lambda g: (g / (2.0 * out),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Inverted dropout; the sampled mask is a constant of the graph."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    x = astensor(x)
    if not training or rate == 0.0:
        return x
    keep = 1.0 - rate
    draw_dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    mask = (rng.random(x.shape, dtype=draw_dtype) < keep).astype(x.dtype) / keep
    return apply_op(x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# reductions and normalizations


def _reduced_count(shape: tuple[int, ...], axis) -> int:
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return int(np.prod([shape[_normalize_axis(a, len(shape))] for a in axes]))


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(_normalize_axis(a, len(shape)) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = astensor(x)
    if axis is not None:
        _reduced_count(x.shape, axis)  # validates axis
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        return (_expand_reduced(g, x.shape, axis, keepdims).astype(x.dtype, copy=False),)

    return apply_op(out, (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = astensor(x)
    count = _reduced_count(x.shape, axis)
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        return (_expand_reduced(g, x.shape, axis, keepdims) / count,)

    return apply_op(out, (x,), bw)


def variance(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Biased variance (mean of squared deviations)."""
    x = astensor(x)
    count = _reduced_count(x.shape, axis)
    mu = x.data.mean(axis=axis, keepdims=True)
    out = ((x.data - mu) ** 2).mean(axis=axis, keepdims=keepdims)

    def bw(g):
        gb = _expand_reduced(g, x.shape, axis, keepdims)
        return (gb * 2.0 * (x.data - mu) / count,)

    return apply_op(out, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along ``axis``."""
    x = astensor(x)
    ax = _normalize_axis(axis, max(x.ndim, 1)) if x.ndim else 0
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=ax, keepdims=True)
        return (out * (g - dot),)

    return apply_op(out, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = astensor(x)
    ax = _normalize_axis(axis, max(x.ndim, 1)) if x.ndim else 0
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=ax, keepdims=True),)

    return apply_op(out, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    x = astensor(x)
    mu = mean(x, axis=-1, keepdims=True)
    var = variance(x, axis=-1, keepdims=True)
    xhat = div(sub(x, mu), sqrt(add(var, eps)))
    if gain is not None:
        xhat = mul(xhat, gain)
    if bias is not None:
        xhat = add(xhat, bias)
    return xhat


# ---------------------------------------------------------------------------
# shape movement


def reshape(x: Tensor, shape) -> Tensor:
    x = astensor(x)
    out = x.data.reshape(shape)
    return apply_op(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    x = astensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(_normalize_axis(a, x.ndim) for a in axes)
    inverse = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return apply_op(out, (x,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [astensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ax = _normalize_axis(axis, tensors[0].ndim)
    out = np.concatenate([t.data for t in tensors], axis=ax)
    offsets = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, offsets, axis=ax))

    return apply_op(out, tuple(tensors), bw)


def slice_(x: Tensor, key) -> Tensor:
    """Basic indexing only (ints, slices, Ellipsis, None)."""
    x = astensor(x)
    _check_basic_key(key)
    out = x.data[key]

    def bw(g):
        gz = np.zeros_like(x.data)
        gz[key] += g
        return (gz,)

    return apply_op(out, (x,), bw)


def _check_basic_key(key) -> None:
    parts = key if isinstance(key, tuple) else (key,)
    for p in parts:
        if isinstance(p, (list, np.ndarray)):
            raise ValueError("advanced indexing is not differentiable here; use index_select or gather_pairs")


def index_select(x: Tensor, axis: int, indices) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in backward."""
    x = astensor(x)
    ax = _normalize_axis(axis, x.ndim)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("indices must be 1-d")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[ax]):
        raise ValueError(f"index out of range for axis {ax} with extent {x.shape[ax]}")
    out = np.take(x.data, idx, axis=ax)

    def bw(g):
        gz = np.zeros_like(x.data)
        np.add.at(np.moveaxis(gz, ax, 0), idx, np.moveaxis(g, ax, 0))
        return (gz,)

    return apply_op(out, (x,), bw)


def gather_pairs(x: Tensor, rows, cols) -> Tensor:
    """out[i] = x[rows[i], cols[i]] for a 2-d tensor."""
    x = astensor(x)
    if x.ndim != 2:
        raise ValueError("gather_pairs expects a 2-d tensor")
    r = np.asarray(rows, dtype=np.intp)
    c = np.asarray(cols, dtype=np.intp)
    out = x.data[r, c]

    def bw(g):
        gz = np.zeros_like(x.data)
        np.add.at(gz, (r, c), g)
        return (gz,)

    return apply_op(out, (x,), bw)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    message: str = ""

    def __bool__(self) -> bool:
        return self.passed


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               tol: float = 1e-4) -> GradCheckResult:
    """Compare the analytic gradient of scalar ``f`` at ``x`` to central differences.

    Relative error per element uses a max(|analytic|, |numeric|, 1e-8)
    denominator. Run in float64 for meaningful tolerances.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    reset_tape()
    y = f(x)
    if y.size != 1:
        raise ValueError("grad_check requires a scalar-valued function")
    x.grad = None  # a previous backward may have left an accumulated gradient
    backward(y)
    if x.grad is None:
        return GradCheckResult(False, math.inf, "no gradient reached x")
    analytic = x.grad.copy()
    x.grad = None

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            num_flat[i] = (fp - fm) / (2.0 * eps)
    reset_tape()

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        bad = np.argwhere(~(np.isfinite(analytic) & np.isfinite(numeric)))[0]
        return GradCheckResult(False, math.inf, f"non-finite gradient at element {tuple(bad)}")
    worst = float(rel.max()) if rel.size else 0.0
    return GradCheckResult(worst <= tol, worst)
