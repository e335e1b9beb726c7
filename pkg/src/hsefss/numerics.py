"""Minimal differentiable tensor substrate.

Tensors wrap read-only numpy arrays. Operations executed while a
:class:`GradTape` is active are recorded in order; :meth:`GradTape.gradient`
replays them backwards to produce gradients. Only the op set needed by the
segmentation pipeline is provided.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, EvaluationError

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


class Tensor:
    """Immutable dense array with an optional gradient requirement."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype, copy=True)
        self.data = _frozen(arr)
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = _frozen(np.asarray(arr, order="C"))
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype, name=self.name)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        dtype = DEFAULT_DTYPE
    return Tensor(x, dtype=dtype)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class GradTape:
    """Records differentiable ops executed while active (``with GradTape() as tape``).

    A tape belongs to the thread that entered it.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
        self.nodes.append(_Node(out, inputs, backward))

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of the scalar ``target`` w.r.t. each of ``sources``.

        Sources that ``target`` does not depend on receive zeros.
        """
        if target.size != 1:
            raise DimensionError(f"gradient target must be scalar, got shape {target.shape}")
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        return [
            grads[id(s)].astype(s.dtype, copy=False) if id(s) in grads else np.zeros_like(s.data)
            for s in sources
        ]

    def touched(self) -> set[int]:
        """ids of every tensor that entered a recorded op."""
        ids = set()
        for node in self.nodes:
            ids.update(id(t) for t in node.inputs)
        return ids


def _emit(arr: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, requires_grad=needs)
    stack = _tape_stack()
    if needs and stack:
        stack[-1].record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(a.data * b.data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _emit(y, (x,), lambda g: (g * y * (1 - y),))


def log(x: Tensor) -> Tensor:
    return _emit(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


_ELEMENTWISE = {"add": add, "mul": mul, "sub": sub, "relu": relu, "sigmoid": sigmoid}


def elementwise(kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    if kind in ("relu", "sigmoid"):
        return fn(a)
    if b is None:
        raise ValueError(f"{kind} needs two operands")
    return fn(a, b)


# --------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _emit(a.data @ b.data, (a, b), backward)


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.data.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last axis, got {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _emit(y, (x,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _emit(np.asarray(out, dtype=x.dtype), (x,), backward)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis), 1.0 / float(n))


# --------------------------------------------------------------------------
# shape manipulation


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from None
    return _emit(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(x.data.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from None
    return _emit(out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    try:
        out = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat mismatch: {[t.shape for t in xs]} ({exc})") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def backward(g):
        idx = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx[axis] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return parts

    return _emit(out, xs, backward)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _emit(np.array(out), (x,), backward)


# --------------------------------------------------------------------------
# spatial ops


def conv_output_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a ``C_in x H x W`` map with ``C_out x C_in x k x k`` kernels."""
    if x.data.ndim != 3 or kernels.data.ndim != 4:
        raise DimensionError(f"conv2d expects 3-d input and 4-d kernels, got {x.shape} and {kernels.shape}")
    cin, h, w = x.shape
    cout, kcin, k, k2 = kernels.shape
    if kcin != cin or k != k2:
        raise DimensionError(f"conv2d kernel {kernels.shape} does not fit input {x.shape}")
    if k % 2 == 0:
        raise DimensionError(f"conv2d kernel extent must be odd, got {k}")
    ho = conv_output_extent(h, k, stride, padding)
    wo = conv_output_extent(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output extent {ho}x{wo} < 1 for input {x.shape}")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    cols = np.empty((cin, k, k, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i:i + span_h:stride, j:j + span_w:stride]
    cols = cols.reshape(cin * k * k, ho * wo)
    w2 = kernels.data.reshape(cout, cin * k * k)
    out = (w2 @ cols).reshape(cout, ho, wo)
    inputs: tuple[Tensor, ...] = (x, kernels)
    if bias is not None:
        if bias.shape != (cout,):
            raise DimensionError(f"conv2d bias shape {bias.shape} != ({cout},)")
        out = out + bias.data[:, None, None]
        inputs = (x, kernels, bias)

    def backward(g):
        g2 = g.reshape(cout, ho * wo)
        gk = (g2 @ cols.T).reshape(kernels.shape) if kernels.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (w2.T @ g2).reshape(cin, k, k, ho, wo)
            dxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    dxp[:, i:i + span_h:stride, j:j + span_w:stride] += dcols[:, i, j]
            gx = dxp[:, padding:padding + h, padding:padding + w] if padding else dxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)) if bias.requires_grad else None)
        return grads

    return _emit(out.astype(x.dtype, copy=False), inputs, backward)


def bilinear_matrix(n_out: int, n_in: int, dtype=np.float64) -> np.ndarray:
    """Row-stochastic ``n_out x n_in`` interpolation matrix (half-pixel centers, edge clamped)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[o, i0] += 1.0 - lam
        m[o, i1] += lam
    return m


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinear resize over the last two axes of a 2-d or 3-d tensor."""
    if x.data.ndim not in (2, 3):
        raise DimensionError(f"resize expects 2-d or 3-d input, got {x.shape}")
    h, w = x.shape[-2:]
    ho, wo = size
    if ho < 1 or wo < 1:
        raise DimensionError(f"resize target {size} must be positive")
    if (h, w) == (ho, wo):
        return _emit(x.data.copy(), (x,), lambda g: (g,))
    ah = bilinear_matrix(ho, h, x.dtype)
    aw = bilinear_matrix(wo, w, x.dtype)
    out = ah @ x.data @ aw.T
    return _emit(out, (x,), lambda g: (ah.T @ g @ aw,))


# --------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_entries: int
    worst: tuple[int, int] | None  # (param index, flat entry index)
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def check_gradients(
    f: Callable[[list[Tensor]], Tensor],
    params: Iterable[Tensor],
    eps: float = 1e-6,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(params)`` with central differences.

    ``params`` are promoted to 64-bit. Relative error uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    base = [np.array(p.data, dtype=np.float64) for p in params]

    def evaluate(arrays) -> float:
        val = f([Tensor(a, dtype=np.float64) for a in arrays])
        v = float(np.asarray(val.data).reshape(-1)[0])
        if not math.isfinite(v):
            raise EvaluationError(f"objective is not finite ({v})")
        return v

    watched = [Tensor(a, requires_grad=True, dtype=np.float64) for a in base]
    with GradTape() as tape:
        out = f(watched)
    if not np.all(np.isfinite(out.data)):
        raise EvaluationError("objective is not finite")
    analytic = tape.gradient(out, watched)

    worst_err, worst, count = 0.0, None, 0
    for pi, arr in enumerate(base):
        flat = arr.reshape(-1)
        for ei in range(flat.size):
            orig = flat[ei]
            flat[ei] = orig + eps
            fp = evaluate(base)
            flat[ei] = orig - eps
            fm = evaluate(base)
            flat[ei] = orig
            numeric = (fp - fm) / (2 * eps)
            a = float(analytic[pi].reshape(-1)[ei])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            count += 1
            if err > worst_err or worst is None:
                worst_err, worst = err, (pi, ei)
    return GradCheckReport(worst_err, count, worst, tol)
