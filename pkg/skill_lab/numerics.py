"""
Numerics - dense tensors with reverse-mode gradients

A Tensor wraps a numpy array. Tensors that need gradients are registered on a
ComputationRecord with `record.watch(...)`; every primitive applied to them is
appended to that record together with a closure that maps the output gradient
to input gradients. `record.backward(loss)` replays the closures in exact
reverse order and leaves a `.grad` on every watched tensor.

    record = ComputationRecord()
    theta = record.watch([1.0, 2.0])
    loss = sum_all(theta * theta)
    record.backward(loss)
    theta.grad  # [2., 4.]

Reductions accumulate in float64 and are cast back to the input dtype.
"""
import math
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import GradientError, ShapeError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

LAYER_NORM_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Tensor:
    """Dense row-major array, optionally tracked by a ComputationRecord"""

    __slots__ = ("data", "requires_grad", "grad", "record")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        record: Optional["ComputationRecord"] = None,
        dtype: Optional[Union[str, np.dtype]] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        array = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if array.dtype not in _FLOAT_DTYPES:
            array = array.astype(np.float32)
        if requires_grad and record is None:
            raise GradientError("tensors that require gradients must be created with ComputationRecord.watch()")
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.record = record

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        if self.record is None:
            raise GradientError("this tensor was not produced from any watched tensor; nothing to differentiate")
        self.record.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return self.__mul__(other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: ArrayLike) -> "Tensor":
        return matmul(self, other)


class _Node:
    __slots__ = ("output", "parents", "backward")

    def __init__(self, output: Tensor, parents: Tuple[Tensor, ...], backward: BackwardFn):
        self.output = output
        self.parents = parents
        self.backward = backward


class ComputationRecord:
    """Ordered log of primitives applied to watched tensors"""

    def __init__(self):
        self._nodes: List[_Node] = []
        self._leaves: List[Tensor] = []
        self._spent = False

    def __len__(self) -> int:
        return len(self._nodes)

    @property
    def leaves(self) -> List[Tensor]:
        return list(self._leaves)

    def watch(self, data: ArrayLike, dtype: Optional[Union[str, np.dtype]] = None) -> Tensor:
        """Register a leaf tensor whose gradient backward() must produce"""
        array = np.array(data.data if isinstance(data, Tensor) else data, dtype=dtype, copy=True)
        if array.dtype not in _FLOAT_DTYPES:
            array = array.astype(np.float32)
        leaf = Tensor(array, requires_grad=True, record=self)
        self._leaves.append(leaf)
        self._spent = False
        return leaf

    def append(self, output: Tensor, parents: Tuple[Tensor, ...], backward: BackwardFn) -> None:
        self._nodes.append(_Node(output, parents, backward))
        self._spent = False

    def backward(self, loss: Tensor) -> None:
        """Populate `.grad` on every watched tensor, then clear the record"""
        if loss.size != 1:
            raise GradientError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self._spent:
            raise GradientError("backward() called twice without a new forward pass")
        if loss.record is not None and loss.record is not self:
            raise GradientError("loss was recorded on a different ComputationRecord")

        grads = {}
        if loss.record is self:
            grads[id(loss)] = np.ones_like(loss.data)

        for node in reversed(self._nodes):
            upstream = grads.pop(id(node.output), None)
            if upstream is None:
                continue
            for parent, grad in zip(node.parents, node.backward(upstream)):
                if grad is None or not parent.requires_grad:
                    continue
                grad = np.asarray(grad, dtype=parent.dtype)
                if grad.shape != parent.shape:
                    raise GradientError(
                        f"gradient shape {grad.shape} does not match tensor shape {parent.shape}"
                    )
                key = id(parent)
                grads[key] = grads[key] + grad if key in grads else grad

        for leaf in self._leaves:
            grad = grads.get(id(leaf))
            leaf.grad = grad if grad is not None else np.zeros_like(leaf.data)

        self._nodes.clear()
        self._spent = True


def as_tensor(value: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype) if dtype is not None else value)


def _record_for(parents: Sequence[Tensor]) -> Optional[ComputationRecord]:
    record = None
    for parent in parents:
        if parent.requires_grad:
            if record is None:
                record = parent.record
            elif parent.record is not record:
                raise GradientError("inputs belong to different ComputationRecords")
    return record


def _emit(data: np.ndarray, parents: Tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    record = _record_for(parents)
    if record is None:
        return Tensor(data)
    out = Tensor(data, requires_grad=True, record=record)
    record.append(out, parents, backward)
    return out


def _pair(a: ArrayLike, b: ArrayLike) -> Tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a scalar constant"""
    factor_cast = x.dtype.type(factor)
    return _emit(x.data * factor_cast, (x,), lambda g: (g * factor_cast,))


def square(x: Tensor) -> Tensor:
    return _emit(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def sqrt(x: Tensor) -> Tensor:
    """Square root; the gradient at 0 is taken as 0"""
    if np.any(x.data < 0):
        raise ShapeError("sqrt: negative input")
    out = np.sqrt(x.data)

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return _emit(out, (x,), backward)


def absolute(x: Tensor) -> Tensor:
    """|x| with subgradient 0 at 0"""
    return _emit(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def clip_max(x: Tensor, cap: float) -> Tensor:
    """min(x, cap); clamped entries receive no gradient"""
    keep = x.data <= cap
    return _emit(np.minimum(x.data, x.dtype.type(cap)), (x,), lambda g: (g * keep,))


def cast(x: Tensor, dtype: Union[str, np.dtype]) -> Tensor:
    target = np.dtype(dtype)
    if x.dtype == target:
        return x
    return _emit(x.data.astype(target), (x,), lambda g: (g.astype(x.dtype),))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation"""
    inner = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(inner)
    out = 0.5 * x.data * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner),)

    return _emit(out.astype(x.dtype), (x,), backward)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def sum_all(x: Tensor) -> Tensor:
    total = np.sum(x.data, dtype=np.float64).astype(x.dtype)
    return _emit(np.asarray(total), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def sum_axis(x: Tensor, axis: int) -> Tensor:
    out = np.sum(x.data, axis=axis, dtype=np.float64).astype(x.dtype)
    return _emit(out, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    if x.size == 0:
        raise ShapeError("mean of an empty tensor")
    n = x.size
    total = (np.sum(x.data, dtype=np.float64) / n).astype(x.dtype)
    return _emit(np.asarray(total), (x,), lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


def quadratic_penalty(x: Tensor, anchor: np.ndarray, weights: np.ndarray) -> Tensor:
    """Σ ½ w (x − anchor)², accumulated in float64"""
    if x.shape != anchor.shape or x.shape != weights.shape:
        raise ShapeError(
            f"quadratic_penalty: x {x.shape}, anchor {anchor.shape} and weights {weights.shape} must match"
        )
    diff = x.data.astype(np.float64) - anchor.astype(np.float64)
    weights64 = weights.astype(np.float64)
    value = 0.5 * np.sum(weights64 * diff * diff, dtype=np.float64)
    return _emit(np.asarray(value), (x,), lambda g: (g * weights64 * diff,))


# ---------------------------------------------------------------------------
# Linear algebra and layout
# ---------------------------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """(..., m, k) @ (k, n) or batched (..., m, k) @ (..., k, n) with equal batch dims"""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ, left {a.shape} has {a.shape[-1]} columns, "
            f"right {b.shape} has {b.shape[-2]} rows"
        )
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape[:-2]} vs {b.shape[:-2]}")

    def backward(g):
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2:
            grad_b = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            grad_b = np.swapaxes(a.data, -1, -2) @ g
        return grad_a, grad_b

    return _emit(a.data @ b.data, (a, b), backward)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _emit(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """x[..., start:stop]"""
    width = x.shape[-1]
    if not 0 <= start < stop <= width:
        raise ShapeError(f"slice [{start}:{stop}] out of bounds for last dimension {width}")

    def backward(g):
        grad = np.zeros_like(x.data)
        grad[..., start:stop] = g
        return (grad,)

    return _emit(x.data[..., start:stop], (x,), backward)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of an empty list")
    tensors = tuple(parts)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat along axis {axis}: incompatible shapes {shapes}") from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------------------
# Indexing
# ---------------------------------------------------------------------------

def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: table[ids] for an integer array of any shape"""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: ids must lie in [0, {table.shape[0]}), got range [{ids.min()}, {ids.max()}]")

    def backward(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids, g)
        return (grad,)

    return _emit(table.data[ids], (table,), backward)


def index_rows(x: Tensor, batch_index: np.ndarray, position_index: np.ndarray) -> Tensor:
    """x[batch_index, position_index] for a (B, T, V) tensor, giving (M, V)"""
    if x.ndim != 3:
        raise ShapeError(f"index_rows expects a (batch, seq, vocab) tensor, got {x.shape}")

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, (batch_index, position_index), g)
        return (grad,)

    return _emit(x.data[batch_index, position_index], (x,), backward)


def take_columns(x: Tensor, columns: np.ndarray) -> Tensor:
    """x[:, columns] for a 2-D tensor"""
    if x.ndim != 2:
        raise ShapeError(f"take_columns expects a 2-D tensor, got {x.shape}")
    columns = np.asarray(columns)
    if len(np.unique(columns)) != len(columns):
        raise ShapeError("take_columns: column indices must be distinct")

    def backward(g):
        grad = np.zeros_like(x.data)
        grad[:, columns] = g
        return (grad,)

    return _emit(x.data[:, columns], (x,), backward)


def pick(x: Tensor, columns: np.ndarray) -> Tensor:
    """x[i, columns[i]] for a 2-D tensor, giving a vector"""
    if x.ndim != 2 or len(columns) != x.shape[0]:
        raise ShapeError(f"pick: need one column per row of {x.shape}, got {len(columns)}")
    rows = np.arange(x.shape[0])

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, (rows, columns), g)
        return (grad,)

    return _emit(x.data[rows, columns], (x,), backward)


# ---------------------------------------------------------------------------
# Normalisation
# ---------------------------------------------------------------------------

def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis"""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    out = exps / exps.sum(axis=-1, keepdims=True)
    return _emit(out, (x,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),))


def log_softmax(x: Tensor) -> Tensor:
    """Log-softmax over the last axis, log-sum-exp stabilised"""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)
    return _emit(out, (x,), lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then scale and shift"""
    width = x.shape[-1]
    if gain.shape != (width,) or bias.shape != (width,):
        raise ShapeError(f"layer_norm: gain {gain.shape} and bias {bias.shape} must be ({width},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    var = (centred * centred).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centred * inv
    out = normed * gain.data + bias.data

    def backward(g):
        d_normed = g * gain.data
        grad_x = inv * (
            d_normed
            - d_normed.mean(axis=-1, keepdims=True)
            - normed * (d_normed * normed).mean(axis=-1, keepdims=True)
        )
        flat_g = g.reshape(-1, width)
        grad_gain = (flat_g * normed.reshape(-1, width)).sum(axis=0)
        grad_bias = flat_g.sum(axis=0)
        return grad_x, grad_gain, grad_bias

    return _emit(out.astype(x.dtype), (x, gain, bias), backward)
