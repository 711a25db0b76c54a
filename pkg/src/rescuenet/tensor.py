"""Dense tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
are recorded in execution order whenever at least one input requires a
gradient. ``tape.backward(loss)`` then walks the recording in reverse and
writes ``.grad`` on every reachable tensor that requires one. Outside a tape
the same functions simply compute values, which is what inference uses.

Storage is a C-contiguous numpy array, 32-bit by default. 64-bit tensors are
supported so gradients can be checked against finite differences; the two
dtypes are never mixed within one operation.
"""

from __future__ import annotations

import contextvars
import math
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32
_ALLOWED = (np.dtype(np.float32), np.dtype(np.float64))

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "rescuenet_tape", default=None
)


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """n-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in _ALLOWED else DEFAULT_DTYPE
        arr = np.ascontiguousarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED:
            raise TypeError(f"unsupported dtype {arr.dtype}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    # -- metadata -----------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, dtype=dtype)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators ----------------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def tensor(data, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


class Tape:
    """Ordered record of differentiable operations for one forward pass.

    A tape is single-use: :meth:`backward` consumes it.
    """

    def __init__(self):
        self._tensors: list[Tensor] = []
        self._index: dict[int, int] = {}
        # (output id, input ids, backward rule)
        self._ops: list[tuple[int, tuple[int | None, ...], Callable]] = []
        self._producer: set[int] = set()
        self.consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed")
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._ops)

    def _node(self, t: Tensor) -> int:
        key = id(t)
        idx = self._index.get(key)
        if idx is None:
            idx = len(self._tensors)
            self._tensors.append(t)
            self._index[key] = idx
        return idx

    def record(self, out: Tensor, inputs: Sequence[Tensor], rule: Callable) -> None:
        if self.consumed:
            raise TapeError("tape already consumed")
        in_ids = tuple(self._node(t) if t.requires_grad else None for t in inputs)
        out_id = self._node(out)
        self._ops.append((out_id, in_ids, rule))
        self._producer.add(out_id)

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("tape already consumed")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss_id = self._index.get(id(loss))
        if loss_id is None or loss_id not in self._producer:
            raise TapeError("loss was not produced on this tape")
        self.consumed = True

        grads: dict[int, np.ndarray] = {loss_id: np.ones_like(loss.data)}
        for out_id, in_ids, rule in reversed(self._ops):
            g = grads.get(out_id)
            if g is None:
                continue
            input_grads = rule(g)
            for node, ig in zip(in_ids, input_grads):
                if node is None or ig is None:
                    continue
                if node in grads:
                    grads[node] = grads[node] + ig
                else:
                    grads[node] = ig
        for node, g in grads.items():
            t = self._tensors[node]
            if t.requires_grad:
                t.grad = np.ascontiguousarray(g, dtype=t.dtype).reshape(t.shape)
        self._ops.clear()
        self._tensors.clear()
        self._index.clear()


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def current_tape() -> Tape | None:
    return _active_tape.get()


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _check_dtypes(*ts: Tensor) -> None:
    dt = ts[0].dtype
    for t in ts[1:]:
        if t.dtype != dt:
            raise TypeError(f"mixed dtypes {dt} and {t.dtype}")


def make_op(data: np.ndarray, inputs: Sequence[Tensor], rule: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op and record ``rule`` if needed.

    ``rule(grad_out)`` returns one gradient (or None) per input.
    """
    needs = any(t.requires_grad for t in inputs)
    tape = _active_tape.get() if needs else None
    out = Tensor(data, requires_grad=tape is not None, dtype=inputs[0].dtype if inputs else None)
    if tape is not None:
        tape.record(out, inputs, rule)
    return out


# -- broadcasting -----------------------------------------------------------

def broadcast_shape(a: Sequence[int], b: Sequence[int]) -> tuple[int, ...]:
    """Trailing-dimension alignment: sizes must match or one of them is 1."""
    out = []
    for i in range(1, max(len(a), len(b)) + 1):
        da = a[-i] if i <= len(a) else 1
        db = b[-i] if i <= len(b) else 1
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"shapes {tuple(a)} and {tuple(b)} are not broadcastable")
        out.append(max(da, db))
    return tuple(reversed(out))


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary(a, b):
    if not isinstance(a, Tensor):
        a = _as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = _as_tensor(b, like=a)
    _check_dtypes(a, b)
    shape = broadcast_shape(a.shape, b.shape)
    return a, b, shape


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b, _ = _binary(a, b)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b, _ = _binary(a, b)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b, _ = _binary(a, b)
    ad, bd = a.data, b.data
    return make_op(
        ad * bd,
        (a, b),
        lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b, _ = _binary(a, b)
    ad, bd = a.data, b.data

    def rule(g):
        ga = g / bd
        return unbroadcast(ga, ad.shape), unbroadcast(-ga * ad / bd, bd.shape)

    return make_op(ad / bd, (a, b), rule)


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_op(np.log(ad), (a,), lambda g: (g / ad,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, div, neg, log, exp."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"neg": neg, "log": log, "exp": exp}
    if op_kind in binary:
        return binary[op_kind](a, b)
    if op_kind in unary:
        return unary[op_kind](_as_tensor(a))
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is passed only where no clamping happened."""
    ad = a.data
    inside = (ad >= lo) & (ad <= hi)
    return make_op(np.clip(ad, lo, hi), (a,), lambda g: (g * inside,))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    pos = ad > 0
    return make_op(np.where(pos, ad, 0).astype(ad.dtype), (a,), lambda g: (g * pos,))


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    # split by sign so exp never overflows
    z = np.exp(-np.abs(ad))
    out = np.where(ad >= 0, 1 / (1 + z), z / (1 + z)).astype(ad.dtype)
    fi = np.finfo(ad.dtype)
    out = np.clip(out, fi.tiny, 1 - fi.epsneg)
    return make_op(out, (a,), lambda g: (g * out * (1 - out),))


def _check_axis(ndim: int, axis: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} invalid for {ndim}-d tensor")
    return axis % ndim


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(a.ndim, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (a,), rule)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis(a.ndim, axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def rule(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_op(out, (a,), rule)


# -- reductions and shape ops -----------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(_check_axis(ndim, ax) for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else d for i, d in enumerate(shape))

    def rule(g):
        return (np.broadcast_to(g.reshape(kept), shape),)

    return make_op(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), rule)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum_(a, axis=axes, keepdims=keepdims), 1.0 / n)


def exact_sum(a: Tensor) -> Tensor:
    """Correctly rounded total of all elements.

    The value does not depend on element order, which keeps pixel reductions
    in the losses invariant under any permutation of pixels.
    """
    shape = a.shape
    total = math.fsum(a.data.ravel().tolist())
    return make_op(np.asarray(total, dtype=a.dtype), (a,), lambda g: (np.broadcast_to(g, shape),))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return make_op(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    shape = a.shape
    dtype = a.dtype

    def rule(g):
        full = np.zeros(shape, dtype=dtype)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_op(np.ascontiguousarray(a.data[index]), (a,), rule)


def _is_fancy(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    _check_dtypes(*tensors)
    axis = _check_axis(tensors[0].ndim, axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, rule)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return make_op(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# -- gradient oracle --------------------------------------------------------

def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-5,
    dtype=np.float64,
) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` maps a tensor to a scalar tensor. Both the analytic gradient and the
    differences are computed at ``dtype`` (64-bit by default). NaN anywhere
    yields ``inf`` so callers see a failure.
    """
    base = np.array(x.data, dtype=dtype)
    xt = Tensor(base.copy(), requires_grad=True, dtype=dtype)
    with Tape() as tape:
        out = f(xt)
    if out.requires_grad:
        tape.backward(out)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(base)

    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(base, dtype=dtype)).data.reshape(-1)[0])
        flat[i] = orig - h
        fm = float(f(Tensor(base, dtype=dtype)).data.reshape(-1)[0])
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    if not np.all(np.isfinite(err)):
        return math.inf
    return float(err.max()) if err.size else 0.0
