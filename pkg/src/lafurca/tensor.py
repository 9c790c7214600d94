"""Dense tensors with tape-based reverse-mode automatic differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = (w * w).sum()
    tape.backward(loss)
    w.grad  # -> [2., 2., 2.]

Outside of a tape nothing is recorded, which is what inference code wants.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TensorError",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "as_tensor",
    "custom_op",
    "matmul",
    "concat",
    "stack",
    "prelu",
    "softmax",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "log10",
    "sqrt",
    "unfold",
    "fold",
    "pad_end",
]

_LN10 = math.log(10.0)


class TensorError(Exception):
    """Base class for tensor library errors."""


class ShapeError(TensorError, ValueError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        desc = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class NonFiniteError(TensorError, FloatingPointError):
    def __init__(self, op: str, shape):
        self.op = op
        self.shape = tuple(shape)
        super().__init__(f"{op}: produced non-finite values (output shape {self.shape})")


class TapeError(TensorError, RuntimeError):
    pass


_active_tapes: list["Tape"] = []


class _Node:
    __slots__ = ("out", "parents", "backward", "op")

    def __init__(self, out, parents, backward, op):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.op = op


class Tape:
    """Ordered record of operations, consumed by a single :meth:`backward`."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self):
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc):
        _active_tapes.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: "Tensor") -> dict[int, np.ndarray]:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape.

        Returns a mapping ``id(leaf) -> gradient`` for the leaves reached.
        """
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._node is None or loss._tape is not self:
            raise TapeError("loss was not produced on this tape")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise TapeError(
                        f"{node.op}: backward produced grad {pg.shape} for input {parent.data.shape}"
                    )
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                    if parent._node is None or parent._tape is not self:
                        leaves[key] = parent
        self.nodes.clear()

        out = {}
        for key, leaf in leaves.items():
            g = grads[key].astype(leaf.data.dtype, copy=False)
            if leaf.grad is None:
                leaf.grad = g.copy()
            else:
                leaf.grad += g
            out[key] = leaf.grad
        return out


def _recording(parents) -> "Tape | None":
    if not _active_tapes:
        return None
    if any(p.requires_grad for p in parents):
        return _active_tapes[-1]
    return None


def _check_finite(op: str, data: np.ndarray):
    if not np.isfinite(data).all():
        raise NonFiniteError(op, data.shape)


def custom_op(op: str, data: np.ndarray, parents: Sequence["Tensor"],
              backward: Callable[[np.ndarray], Sequence["np.ndarray | None"]]) -> "Tensor":
    """Wrap a precomputed forward value as a tensor with a hand-written backward rule.

    ``backward(g)`` must return one gradient (or ``None``) per parent.
    """
    _check_finite(op, data)
    out = Tensor(data)
    tape = _recording(parents)
    if tape is not None:
        out.requires_grad = True
        out._node = _Node(out, tuple(parents), backward, op)
        out._tape = tape
        tape.nodes.append(out._node)
    return out


def as_tensor(x, dtype=None) -> "Tensor":
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


class Tensor:
    """N-d float array with an optional gradient.

    ``dtype`` fixes the floating precision (float64 for gradient checks,
    float32 for training); non-float input defaults to float64.
    """

    __array_priority__ = 100
    __slots__ = ("data", "requires_grad", "grad", "_node", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._node = None
        self._tape = None
        self.name = name

    # -- basic properties ---------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- elementwise arithmetic ----------------------------------------
    def _binary(self, other, op, fwd, bwd):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))
        _broadcast_shape(op, self, other)
        a, b = self.data, other.data
        data = fwd(a, b)

        def backward(g):
            ga, gb = bwd(g, a, b, data)
            return (
                _unbroadcast(ga, a.shape) if ga is not None else None,
                _unbroadcast(gb, b.shape) if gb is not None else None,
            )

        return custom_op(op, data, (self, other), backward)

    def __add__(self, other):
        return self._binary(other, "add", np.add, lambda g, a, b, y: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, "sub", np.subtract, lambda g, a, b, y: (g, -g))

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) - self

    def __mul__(self, other):
        return self._binary(other, "mul", np.multiply, lambda g, a, b, y: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary(
            other, "div", np.divide, lambda g, a, b, y: (g / b, -g * y / b)
        )

    def __rtruediv__(self, other):
        return as_tensor(other, self.dtype) / self

    def __neg__(self):
        return custom_op("neg", -self.data, (self,), lambda g: (-g,))

    def __pow__(self, p):
        if isinstance(p, Tensor):
            raise TypeError("only scalar exponents are supported")
        x = self.data
        return custom_op("pow", x ** p, (self,), lambda g: (g * p * x ** (p - 1),))

    def __matmul__(self, other):
        return matmul(self, other)

    # -- reductions -----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        x = self.data
        data = np.asarray(x.sum(axis=axis, keepdims=keepdims))

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, x.shape).copy(),)

        return custom_op("sum", data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        x = self.data
        if axis is None:
            count = x.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = int(np.prod([x.shape[a] for a in axes]))
        data = np.asarray(x.mean(axis=axis, keepdims=keepdims))

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / count, x.shape).copy(),)

        return custom_op("mean", data, (self,), backward)

    # -- shape manipulation --------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        try:
            data = self.data.reshape(shape)
        except ValueError:
            raise ShapeError("reshape", old, shape) from None
        return custom_op("reshape", data, (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        if sorted(axes) != list(range(self.ndim)):
            raise ShapeError("transpose", self.shape, axes)
        inverse = tuple(np.argsort(axes))
        data = np.ascontiguousarray(self.data.transpose(axes))
        return custom_op("transpose", data, (self,), lambda g: (g.transpose(inverse),))

    permute = transpose

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, index):
        x = self.data
        data = np.array(x[index])

        basic = _is_basic_index(index)

        def backward(g):
            out = np.zeros_like(x)
            if basic:
                out[index] += g
            else:
                np.add.at(out, index, g)
            return (out,)

        return custom_op("getitem", data, (self,), backward)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(i is None or i is Ellipsis or isinstance(i, (int, slice)) for i in items)


# -- free functions ------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for operands with ndim >= 2; leading batch axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    x, y = a.data, b.data
    if y.ndim == 2 and x.ndim > 2:
        # (..., m, k) @ (k, n): one 2-D product over the collapsed batch rows
        data = (x.reshape(-1, x.shape[-1]) @ y).reshape(x.shape[:-1] + (y.shape[-1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ y.T).reshape(x.shape) if a.requires_grad else None
            gb = x.reshape(-1, x.shape[-1]).T @ g2 if b.requires_grad else None
            return ga, gb

        return custom_op("matmul", data, (a, b), backward)

    if x.ndim == 2 and y.ndim > 2:
        # (m, k) @ (..., k, n): shared left operand
        data = np.matmul(x, y)

        def backward(g):
            ga = gb = None
            if a.requires_grad:
                gm = np.moveaxis(g, -2, 0).reshape(g.shape[-2], -1)
                ym = np.moveaxis(y, -2, 0).reshape(y.shape[-2], -1)
                ga = gm @ ym.T
            if b.requires_grad:
                gb = np.matmul(x.T, g)
            return ga, gb

        return custom_op("matmul", data, (a, b), backward)

    data = np.matmul(x, y)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(y, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(x, -1, -2), g) if b.requires_grad else None
        return (
            _unbroadcast(ga, x.shape) if ga is not None else None,
            _unbroadcast(gb, y.shape) if gb is not None else None,
        )

    return custom_op("matmul", data, (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return custom_op("concat", data, tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError("stack", *[t.shape for t in tensors])
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return custom_op("stack", data, tensors, backward)


def _unary(op, x: Tensor, fwd, bwd) -> Tensor:
    x = as_tensor(x)
    a = x.data
    with np.errstate(all="ignore"):  # non-finite results are reported by custom_op
        y = fwd(a)
    return custom_op(op, y, (x,), lambda g: (bwd(g, a, y),))


def exp(x):
    return _unary("exp", x, np.exp, lambda g, a, y: g * y)


def log(x):
    return _unary("log", x, np.log, lambda g, a, y: g / a)


def log10(x):
    return _unary("log10", x, np.log10, lambda g, a, y: g / (a * _LN10))


def sqrt(x):
    return _unary("sqrt", x, np.sqrt, lambda g, a, y: g / (2.0 * y))


def tanh(x):
    return _unary("tanh", x, np.tanh, lambda g, a, y: g * (1.0 - y * y))


def _sigmoid(a):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def sigmoid(x):
    return _unary("sigmoid", x, _sigmoid, lambda g, a, y: g * y * (1.0 - y))


def prelu(x: Tensor, slope) -> Tensor:
    """Parametric ReLU; ``slope`` broadcasts against ``x`` (one value per channel)."""
    x, slope = as_tensor(x), as_tensor(slope, dtype=as_tensor(x).dtype)
    _broadcast_shape("prelu", x, slope)
    a, s = x.data, slope.data
    pos = a > 0
    data = np.where(pos, a, s * a)

    def backward(g):
        gx = g * np.where(pos, 1.0, s)
        gs = _unbroadcast(np.where(pos, 0.0, g * a), s.shape)
        return gx.astype(a.dtype, copy=False), gs.astype(s.dtype, copy=False)

    return custom_op("prelu", data, (x, slope), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    a = x.data
    z = np.exp(a - a.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return custom_op("softmax", y, (x,), backward)


# -- framing -------------------------------------------------------------

def _unfold_array(x: np.ndarray, size: int, hop: int, count: int) -> np.ndarray:
    windows = np.lib.stride_tricks.sliding_window_view(x, size, axis=-1)
    windows = windows[..., : (count - 1) * hop + 1 : hop, :]
    return np.ascontiguousarray(np.swapaxes(windows, -1, -2))


def _fold_array(frames: np.ndarray, hop: int, length: int) -> np.ndarray:
    size, count = frames.shape[-2:]
    out = np.zeros(frames.shape[:-2] + (length,), dtype=frames.dtype)
    stop = (count - 1) * hop + 1
    for k in range(size):
        out[..., k : k + stop : hop] += frames[..., k, :]
    return out


def unfold(x: Tensor, size: int, hop: int) -> Tensor:
    """Slice the last axis into ``count`` windows: ``(..., L) -> (..., size, count)``.

    ``L`` must equal ``(count - 1) * hop + size`` exactly; callers pad first.
    """
    x = as_tensor(x)
    length = x.shape[-1]
    if size < 1 or hop < 1 or length < size or (length - size) % hop:
        raise ShapeError(f"unfold(size={size}, hop={hop})", x.shape)
    count = (length - size) // hop + 1
    data = _unfold_array(x.data, size, hop, count)
    return custom_op("unfold", data, (x,), lambda g: (_fold_array(g, hop, length),))


def fold(frames: Tensor, hop: int) -> Tensor:
    """Overlap-add ``(..., size, count) -> (..., (count-1)*hop + size)`` by raw summation."""
    frames = as_tensor(frames)
    if frames.ndim < 2 or hop < 1:
        raise ShapeError(f"fold(hop={hop})", frames.shape)
    size, count = frames.shape[-2:]
    length = (count - 1) * hop + size
    data = _fold_array(frames.data, hop, length)
    return custom_op(
        "fold", data, (frames,), lambda g: (_unfold_array(g, size, hop, count),)
    )


def pad_end(x: Tensor, amount: int) -> Tensor:
    """Zero-pad the last axis by ``amount`` samples at the end."""
    x = as_tensor(x)
    if amount < 0:
        raise ValueError(f"pad amount must be >= 0, got {amount}")
    if amount == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 1) + [(0, amount)]
    length = x.shape[-1]
    data = np.pad(x.data, widths)
    return custom_op("pad_end", data, (x,), lambda g: (np.ascontiguousarray(g[..., :length]),))
