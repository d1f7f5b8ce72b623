"""
Dense 64-bit tensors with reverse-mode automatic differentiation.

Operations executed while a `Tape` is active are recorded on it. `backward`
replays the adjoints of the recorded operations in reverse order and stores
the result in the `grad` buffer of every leaf that requires a gradient.
Outside of a tape, operations are plain numpy computations.

Usage::

    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape():
        loss = (w * w).sum()
        backward(loss)
    w.grad  # array([2., 4.])
"""
from collections import namedtuple
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ContractError, DimensionError

__all__ = (
    "Tensor",
    "Tape",
    "active_tape",
    "as_tensor",
    "backward",
    "matmul",
    "elementwise",
    "reduce",
    "concat",
    "chunk",
    "concat_chunk",
    "reshape",
    "transpose",
    "take",
    "detach",
    "ELEMENTWISE_TAGS",
    "REDUCE_TAGS",
)

Adjoint = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
TensorLike = Union["Tensor", np.ndarray, float, int, Sequence]

_Record = namedtuple("_Record", ["output", "inputs", "adjoint"])


class Tensor:
    """
    N-dimensional array of 64-bit floats in row-major order.

    :param data: Anything `numpy.array` accepts. The values are copied.
    :param requires_grad: When True, `backward` fills `grad` for this tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "_is_leaf", "__weakref__")

    def __init__(self, data: TensorLike, requires_grad: bool = False) -> None:
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._is_leaf = True

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        "Create a tensor around an array without copying it."
        t = cls.__new__(cls)
        t.data = np.asarray(data, dtype=np.float64)
        t.requires_grad = False
        t.grad = None
        t._is_leaf = True
        return t

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape!r}, requires_grad={self.requires_grad!r})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._is_leaf

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}.")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    # Arithmetic.

    def __add__(self, other: TensorLike) -> "Tensor":
        return elementwise("add", self, other)

    def __radd__(self, other: TensorLike) -> "Tensor":
        return elementwise("add", other, self)

    def __sub__(self, other: TensorLike) -> "Tensor":
        return elementwise("sub", self, other)

    def __rsub__(self, other: TensorLike) -> "Tensor":
        return elementwise("sub", other, self)

    def __mul__(self, other: TensorLike) -> "Tensor":
        return elementwise("mul", self, other)

    def __rmul__(self, other: TensorLike) -> "Tensor":
        return elementwise("mul", other, self)

    def __truediv__(self, other: TensorLike) -> "Tensor":
        return elementwise("div", self, other)

    def __rtruediv__(self, other: TensorLike) -> "Tensor":
        return elementwise("div", other, self)

    def __neg__(self) -> "Tensor":
        return elementwise("neg", self)

    def __matmul__(self, other: TensorLike) -> "Tensor":
        return matmul(self, other)

    def relu(self) -> "Tensor":
        return elementwise("relu", self)

    def sigmoid(self) -> "Tensor":
        return elementwise("sigmoid", self)

    def softplus(self) -> "Tensor":
        return elementwise("softplus", self)

    def log(self) -> "Tensor":
        return elementwise("log", self)

    def abs(self) -> "Tensor":
        return elementwise("abs", self)

    def exp(self) -> "Tensor":
        return elementwise("exp", self)

    def sqrt(self) -> "Tensor":
        return elementwise("sqrt", self)

    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce("sum", self, axis, keepdims=keepdims)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce("mean", self, axis, keepdims=keepdims)

    def max(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        return reduce("max", self, axis, keepdims=keepdims)

    def softmax(self, axis: int = -1) -> "Tensor":
        return reduce("softmax", self, axis)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> "Tensor":
        return transpose(self, axes or None)


class Tape:
    """
    Ordered record of the operations executed during one forward pass.

    Only one tape is active at a time. Entering a tape makes it the active
    one; leaving restores the previous tape (usually none).
    """

    def __init__(self) -> None:
        self._records: List[_Record] = []
        self._outputs: Dict[int, int] = {}
        self._previous: Optional["Tape"] = None

    def __enter__(self) -> "Tape":
        global _active
        self._previous = _active
        _active = self
        return self

    def __exit__(self, *exc_info: object) -> None:
        global _active
        _active = self._previous
        self._previous = None

    def __len__(self) -> int:
        return len(self._records)

    def record(self, output: Tensor, inputs: Tuple[Tensor, ...], adjoint: Adjoint) -> None:
        self._outputs[id(output)] = len(self._records)
        self._records.append(_Record(output, inputs, adjoint))

    def produced(self, tensor: Tensor) -> bool:
        "True when `tensor` is the output of an operation on this tape."
        index = self._outputs.get(id(tensor))
        return index is not None and self._records[index].output is tensor

    def clear(self) -> None:
        self._records = []
        self._outputs = {}


_active: Optional[Tape] = None


def active_tape() -> Optional[Tape]:
    return _active


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor._wrap(np.asarray(value, dtype=np.float64))


def _result(data: np.ndarray, inputs: Tuple[Tensor, ...], adjoint: Adjoint) -> Tensor:
    out = Tensor._wrap(data)
    tape = _active
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._is_leaf = False
        tape.record(out, inputs, adjoint)
    return out


def backward(loss: Tensor) -> None:
    """
    Propagate adjoints from a scalar `loss` to every reachable leaf with
    `requires_grad`. Gradients are accumulated into `grad`. The active tape
    is cleared afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}.")

    tape = _active
    if tape is None or not tape.produced(loss):
        raise ContractError("The loss was not produced under the active tape.")

    adjoints: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}

    for record in reversed(tape._records):
        g = adjoints.pop(id(record.output), None)
        if g is None:
            continue

        for inp, gi in zip(record.inputs, record.adjoint(g)):
            if gi is None or not inp.requires_grad:
                continue
            assert gi.shape == inp.shape, f"adjoint {gi.shape} != {inp.shape}"

            key = id(inp)
            adjoints[key] = gi if key not in adjoints else adjoints[key] + gi
            if inp._is_leaf:
                leaves[key] = inp

    for key, leaf in leaves.items():
        g = np.array(adjoints[key], dtype=np.float64)
        leaf.grad = g if leaf.grad is None else leaf.grad + g

    tape.clear()


# Broadcasting: shapes are aligned on their trailing axes. A missing leading
# axis or an axis of size 1 expands; anything else is an error.


def _broadcast_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    result = []
    for i in range(1, max(len(a), len(b)) + 1):
        da = a[-i] if i <= len(a) else 1
        db = b[-i] if i <= len(b) else 1
        if da != db and da != 1 and db != 1:
            raise DimensionError(f"Shapes {a} and {b} are not broadcastable.")
        result.append(max(da, db))
    return tuple(reversed(result))


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    e = np.exp(x[~positive])
    out[~positive] = e / (1.0 + e)
    return out


# (forward, derivative(a, out, g)) per unary tag.
_UNARY: Dict[str, Tuple[Callable, Callable]] = {
    "relu": (
        lambda a: np.where(a > 0, a, 0.0),
        lambda a, out, g: g * (a > 0),
    ),
    "sigmoid": (_sigmoid, lambda a, out, g: g * out * (1.0 - out)),
    "softplus": (
        lambda a: np.logaddexp(0.0, a),
        lambda a, out, g: g * _sigmoid(a),
    ),
    "log": (np.log, lambda a, out, g: g / a),
    "abs": (np.abs, lambda a, out, g: g * np.sign(a)),
    "exp": (np.exp, lambda a, out, g: g * out),
    "sqrt": (np.sqrt, lambda a, out, g: g / (2.0 * out)),
    "neg": (np.negative, lambda a, out, g: -g),
}

# (forward, derivative(a, b, g) -> (ga, gb)) per binary tag.
_BINARY: Dict[str, Tuple[Callable, Callable]] = {
    "add": (np.add, lambda a, b, g: (g, g)),
    "sub": (np.subtract, lambda a, b, g: (g, -g)),
    "mul": (np.multiply, lambda a, b, g: (g * b, g * a)),
    "div": (np.divide, lambda a, b, g: (g / b, -g * a / (b * b))),
}

ELEMENTWISE_TAGS = tuple(sorted(_UNARY)) + tuple(sorted(_BINARY))
REDUCE_TAGS = ("mean", "sum", "max", "softmax")


def elementwise(tag: str, a: TensorLike, b: Optional[TensorLike] = None) -> Tensor:
    """
    Apply an elementwise operation.

    :param tag: One of `ELEMENTWISE_TAGS`. Binary tags (add, sub, mul, div)
        need `b`; the others ignore it.
    """
    ta = as_tensor(a)

    if tag in _UNARY:
        if b is not None:
            raise ContractError(f"Elementwise {tag!r} takes one operand.")
        forward, derivative = _UNARY[tag]
        out = forward(ta.data)

        def unary_adjoint(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
            return (derivative(ta.data, out, g),)

        return _result(out, (ta,), unary_adjoint)

    if tag in _BINARY:
        if b is None:
            raise ContractError(f"Elementwise {tag!r} takes two operands.")
        tb = as_tensor(b)
        _broadcast_shape(ta.shape, tb.shape)
        forward, derivative = _BINARY[tag]
        out = forward(ta.data, tb.data)

        def binary_adjoint(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
            ga, gb = derivative(ta.data, tb.data, g)
            return (
                _unbroadcast(np.broadcast_to(ga, g.shape), ta.shape),
                _unbroadcast(np.broadcast_to(gb, g.shape), tb.shape),
            )

        return _result(out, (ta, tb), binary_adjoint)

    raise ContractError(f"Unknown elementwise op {tag!r}.")


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """
    Matrix product over the last two axes; leading axes broadcast.
    """
    ta, tb = as_tensor(a), as_tensor(b)
    if ta.ndim < 2 or tb.ndim < 2 or ta.shape[-1] != tb.shape[-2]:
        raise DimensionError(f"Cannot multiply shapes {ta.shape} and {tb.shape}.")
    _broadcast_shape(ta.shape[:-2], tb.shape[:-2])

    out = np.matmul(ta.data, tb.data)

    def adjoint(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        ga = np.matmul(g, np.swapaxes(tb.data, -1, -2))
        gb = np.matmul(np.swapaxes(ta.data, -1, -2), g)
        return _unbroadcast(ga, ta.shape), _unbroadcast(gb, tb.shape)

    return _result(out, (ta, tb), adjoint)


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"Axis {axis} out of range for rank {ndim}.")
    return axis % ndim


def reduce(
    tag: str, a: TensorLike, axis: Optional[int] = None, keepdims: bool = False
) -> Tensor:
    """
    Reduce along `axis` (all axes when None).

    "softmax" normalizes along the axis and keeps the shape; the others
    collapse the axis unless `keepdims`.
    """
    ta = as_tensor(a)
    if tag not in REDUCE_TAGS:
        raise ContractError(f"Unknown reduce op {tag!r}.")

    if tag == "softmax":
        ax = _check_axis(-1 if axis is None else axis, ta.ndim)
        shifted = ta.data - ta.data.max(axis=ax, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=ax, keepdims=True)

        def softmax_adjoint(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
            return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

        return _result(out, (ta,), softmax_adjoint)

    axes: Tuple[int, ...]
    if axis is None:
        axes = tuple(range(ta.ndim))
    else:
        axes = (_check_axis(axis, ta.ndim),)
    count = int(np.prod([ta.shape[i] for i in axes])) if axes else 1

    if tag == "sum":
        out = ta.data.sum(axis=axes, keepdims=keepdims)
    elif tag == "mean":
        out = ta.data.mean(axis=axes, keepdims=keepdims)
    else:
        out = ta.data.max(axis=axes, keepdims=keepdims)

    def expand(x: np.ndarray) -> np.ndarray:
        return x if keepdims else np.expand_dims(x, axes)

    def reduce_adjoint(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        full = np.array(np.broadcast_to(expand(g), ta.shape))
        if tag == "mean":
            full = full / count
        elif tag == "max":
            mask = (ta.data == expand(out)).astype(np.float64)
            full = full * mask / mask.sum(axis=axes, keepdims=True)
        return (full,)

    return _result(out, (ta,), reduce_adjoint)


def _slice(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    key = tuple(index)
    out = a.data[key]

    def adjoint(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        full = np.zeros(a.shape)
        full[key] = g
        return (full,)

    return _result(np.array(out), (a,), adjoint)


def concat(tensors: Sequence[TensorLike], axis: int = -1) -> Tensor:
    """
    Concatenate along `axis`. All other axes must agree.
    """
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ContractError("concat() needs at least one tensor.")
    ax = _check_axis(axis, ts[0].ndim)
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise DimensionError(
                f"Cannot concatenate shapes {ts[0].shape} and {t.shape} on axis {axis}."
            )

    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def adjoint(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return tuple(
            np.array(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax))
            for i in range(len(ts))
        )

    return _result(out, ts, adjoint)


def chunk(a: TensorLike, axis: int = -1) -> Tuple[Tensor, Tensor]:
    """
    Split equally into two halves along `axis`.
    """
    ta = as_tensor(a)
    ax = _check_axis(axis, ta.ndim)
    size = ta.shape[ax]
    if size % 2:
        raise DimensionError(f"Cannot chunk odd size {size} on axis {axis} of {ta.shape}.")
    half = size // 2
    return _slice(ta, ax, 0, half), _slice(ta, ax, half, size)


def concat_chunk(
    mode: str, a: TensorLike, b: Optional[TensorLike] = None, axis: int = -1
) -> Union[Tensor, Tuple[Tensor, Tensor]]:
    """
    `mode="concat"` joins `a` and `b`; `mode="chunk"` splits `a` in two.
    """
    if mode == "concat":
        if b is None:
            raise ContractError("concat needs two operands.")
        return concat([a, b], axis=axis)
    if mode == "chunk":
        return chunk(a, axis=axis)
    raise ContractError(f"Unknown mode {mode!r}.")


def reshape(a: TensorLike, shape: Sequence[int]) -> Tensor:
    ta = as_tensor(a)
    try:
        out = ta.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"Cannot reshape {ta.shape} into {tuple(shape)}.")

    def adjoint(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (g.reshape(ta.shape),)

    return _result(out, (ta,), adjoint)


def transpose(a: TensorLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    ta = as_tensor(a)
    perm = tuple(reversed(range(ta.ndim))) if axes is None else tuple(axes)
    if sorted(perm) != list(range(ta.ndim)):
        raise DimensionError(f"Invalid permutation {perm} for rank {ta.ndim}.")
    inverse = tuple(np.argsort(perm))
    out = np.transpose(ta.data, perm)

    def adjoint(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        return (np.transpose(g, inverse),)

    return _result(out, (ta,), adjoint)


def take(a: TensorLike, index: np.ndarray) -> Tensor:
    """
    Gather along the last axis. An index of -1 reads a zero (used as padding).
    The result has shape ``a.shape[:-1] + index.shape``.

    This single operation expresses im2col convolution, nearest-neighbour
    upsampling and the tiling of an image into patches.
    """
    ta = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    features = ta.shape[-1]
    if index.size and (index.min() < -1 or index.max() >= features):
        raise DimensionError(f"Index out of range for last axis of size {features}.")

    lead = ta.shape[:-1]
    padded = np.concatenate([ta.data, np.zeros(lead + (1,))], axis=-1)
    safe = np.where(index < 0, features, index)
    out = padded[..., safe]

    def adjoint(g: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        rows = int(np.prod(lead)) if lead else 1
        flat = g.reshape(rows, -1)
        offsets = (np.arange(rows) * (features + 1))[:, None] + safe.reshape(1, -1)
        summed = np.bincount(
            offsets.ravel(), weights=flat.ravel(), minlength=rows * (features + 1)
        )
        return (summed.reshape(rows, features + 1)[:, :features].reshape(ta.shape),)

    return _result(out, (ta,), adjoint)


def detach(a: TensorLike) -> Tensor:
    "Same values, cut from the tape."
    return Tensor._wrap(as_tensor(a).data)
