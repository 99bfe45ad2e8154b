"""
Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable operation is a `Function` subclass with a `forward` over
raw arrays and a `backward` returning one gradient per input. Calling
`Function.apply` records the result on the tape (define-by-run); `backward()`
walks the recorded graph in reverse topological order.
"""
import contextlib
import itertools
import logging
import threading
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ConfigError, DomainError, ShapeMismatchError

logger = logging.getLogger(__name__)

_PRECISIONS = {'f64': np.float64, 'f32': np.float32}
_dtype = np.float32
_grad_state = threading.local()
_tape_ids = itertools.count()


# ---------------------------------------------------------------------------
# Run-wide switches
# ---------------------------------------------------------------------------

def set_precision(name: str) -> None:
    """Select the run-wide float precision ('f32' or 'f64')."""
    global _dtype
    if name not in _PRECISIONS:
        raise ConfigError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[name]


def get_dtype():
    return _dtype


def get_precision() -> str:
    return 'f64' if _dtype == np.float64 else 'f32'


@contextlib.contextmanager
def precision(name: str):
    previous = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


def is_grad_enabled() -> bool:
    return getattr(_grad_state, 'enabled', True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording in the current thread."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


# ---------------------------------------------------------------------------
# Tensors
# ---------------------------------------------------------------------------

ArrayLike = Union[np.ndarray, float, int, Sequence[float]]


class DenseTensor:
    """An n-dimensional value array with an optional gradient and tape node."""

    __array_priority__ = 1000

    def __init__(self, values: ArrayLike, requires_grad: bool = False, name: Optional[str] = None):
        self.values = np.array(values, dtype=_dtype, copy=True) if not isinstance(values, np.ndarray) \
            else values.astype(_dtype, copy=False)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self.tape_id: Optional[int] = None
        self._creator: Optional['Function'] = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeMismatchError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> 'DenseTensor':
        return DenseTensor(self.values)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ''
        return f"<DenseTensor shape={self.shape}{label} grad={'yes' if self.grad is not None else 'no'}>"

    # -- operators --------------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- method forms -----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> 'DenseTensor':
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> 'DenseTensor':
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> 'DenseTensor':
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> 'DenseTensor':
        return transpose(self, axes or None)

    def relu(self) -> 'DenseTensor':
        return relu(self)

    def sigmoid(self) -> 'DenseTensor':
        return sigmoid(self)

    def backward(self, parameters: Optional[Iterable['DenseTensor']] = None) -> None:
        backward(self, parameters)


class Parameter(DenseTensor):
    """A trainable leaf tensor."""

    def __init__(self, values: ArrayLike, name: Optional[str] = None):
        super().__init__(values, requires_grad=True, name=name)


def as_tensor(value: Any) -> DenseTensor:
    if isinstance(value, DenseTensor):
        return value
    return DenseTensor(value)


# ---------------------------------------------------------------------------
# Function base
# ---------------------------------------------------------------------------

def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out broadcast dimensions so `grad` matches `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Function:
    """A differentiable operation recorded on the tape."""

    def __init__(self, *inputs: DenseTensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Any, **kwargs: Any) -> DenseTensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        fn = cls(*tensors)
        out = DenseTensor(fn.forward(*(t.values for t in tensors), **kwargs))
        if is_grad_enabled() and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            out._creator = fn
            out.tape_id = next(_tape_ids)
        return out


def _topological_order(root: DenseTensor) -> List[DenseTensor]:
    order: List[DenseTensor] = []
    visited = set()
    stack: List[Tuple[DenseTensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._creator is not None:
            for parent in reversed(node._creator.inputs):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: DenseTensor, parameters: Optional[Iterable[DenseTensor]] = None) -> None:
    """Populate .grad for every tensor reachable from a scalar loss.

    Leaf gradients accumulate into an existing .grad; parameters passed in but
    not reached by the graph get a zero gradient.
    """
    if loss.values.size != 1:
        raise ShapeMismatchError(f"backward() needs a scalar loss, got shape {loss.shape}")
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for node in reversed(_topological_order(loss)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node._creator is None:
            node.grad = grad.copy() if node.grad is None else node.grad + grad
            continue
        node.grad = grad
        fn = node._creator
        for parent, parent_grad in zip(fn.inputs, fn.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad
        node._creator = None
    if parameters is not None:
        for param in parameters:
            if param.grad is None:
                param.grad = np.zeros_like(param.values)


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------

class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return unbroadcast(grad * self.b, self.a.shape), unbroadcast(grad * self.a, self.b.shape)


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        ga = grad / self.b
        gb = -grad * self.a / (self.b * self.b)
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


class Power(Function):
    """base ** exponent, with a tensor exponent allowed (GeM learns its p)."""

    def forward(self, base, exponent):
        integral = np.all(np.equal(np.mod(exponent, 1), 0))
        if not integral and np.any(base < 0):
            raise DomainError("pow: negative base with non-integer exponent; clamp the input first")
        self.base, self.exponent = base, exponent
        self.out = np.power(base, exponent)
        return self.out

    def backward(self, grad):
        g_base = grad * self.exponent * np.power(self.base, self.exponent - 1)
        g_exp = None
        if self.inputs[1].requires_grad:
            with np.errstate(divide='ignore', invalid='ignore'):
                log_base = np.where(self.base > 0, np.log(np.where(self.base > 0, self.base, 1)), 0)
            g_exp = unbroadcast(grad * self.out * log_base, self.exponent.shape)
        return unbroadcast(g_base, self.base.shape), g_exp


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


class Sigmoid(Function):
    def forward(self, x):
        self.out = 1.0 / (1.0 + np.exp(-x))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Sqrt(Function):
    def forward(self, x):
        if np.any(x < 0):
            raise DomainError("sqrt of a negative value")
        self.out = np.sqrt(x)
        return self.out

    def backward(self, grad):
        with np.errstate(divide='ignore', invalid='ignore'):
            g = np.where(self.out > 0, grad / (2 * self.out), 0)
        return (g,)


class ClampMin(Function):
    def forward(self, x, floor: float):
        self.mask = x > floor
        return np.where(self.mask, x, floor).astype(x.dtype)

    def backward(self, grad):
        return (grad * self.mask,)


class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            axes = (self.axis,) if isinstance(self.axis, int) else self.axis
            axes = tuple(a % len(self.shape) for a in axes)
            for a in sorted(axes):
                grad = np.expand_dims(grad, a)
        return (np.broadcast_to(grad, self.shape).copy(),)


class Max(Function):
    """Max along one axis; ties send the gradient to the first maximal entry."""

    def forward(self, x, axis: int):
        self.shape, self.axis = x.shape, axis
        self.index = np.argmax(x, axis=axis)
        return np.take_along_axis(x, np.expand_dims(self.index, axis), axis=axis).squeeze(axis)

    def backward(self, grad):
        g = np.zeros(self.shape, dtype=grad.dtype)
        np.put_along_axis(g, np.expand_dims(self.index, self.axis), np.expand_dims(grad, self.axis), axis=self.axis)
        return (g,)


class Reshape(Function):
    def forward(self, x, shape):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, x, axes=None):
        self.axes = axes
        return np.transpose(x, axes)

    def backward(self, grad):
        if self.axes is None:
            return (np.transpose(grad),)
        return (np.transpose(grad, np.argsort(self.axes)),)


class MatMul(Function):
    def forward(self, a, b):
        if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
            raise ShapeMismatchError(
                f"matmul: inner axis mismatch, left axis -1 has {a.shape[-1]}, right axis -2 has {b.shape[-2 if b.ndim > 1 else 0]}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        ga = grad @ np.swapaxes(self.b, -1, -2)
        gb = np.swapaxes(self.a, -1, -2) @ grad
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


class TakeRows(Function):
    """Gather rows (axis 0) by integer index."""

    def forward(self, x, index):
        self.shape, self.index = x.shape, index
        return x[index]

    def backward(self, grad):
        g = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(g, self.index, grad)
        return (g,)


class ScatterRows(Function):
    """out[index[i]] += x[i] into a zero array with n rows (segment sum)."""

    def forward(self, x, index, n):
        self.index = index
        out = np.zeros((n,) + x.shape[1:], dtype=x.dtype)
        np.add.at(out, index, x)
        return out

    def backward(self, grad):
        return (grad[self.index],)


class SegmentMax(Function):
    """Row-wise max within each segment; ties go to the lowest row."""

    def forward(self, x, segments, n):
        out = np.full((n,) + x.shape[1:], -np.inf, dtype=x.dtype)
        np.maximum.at(out, segments, x)
        if np.any(np.isneginf(out)):
            raise ShapeMismatchError("segment_max: a segment has no rows")
        self.shape = x.shape
        rows = x.shape[0]
        candidates = np.where(x == out[segments], np.arange(rows)[:, None], rows)
        self.winner = np.full(out.shape, rows, dtype=np.int64)
        np.minimum.at(self.winner, segments, candidates)
        return out

    def backward(self, grad):
        g = np.zeros(self.shape, dtype=grad.dtype)
        channels = np.broadcast_to(np.arange(self.shape[1]), self.winner.shape)
        g[self.winner.reshape(-1), channels.reshape(-1)] = grad.reshape(-1)
        return (g,)


class RowDistance(Function):
    """Euclidean distance between rows a[i] and b[i] of one matrix.

    The subgradient at coincident rows is zero, so identical descriptors give
    distance exactly 0 without NaN gradients.
    """

    def forward(self, x, left, right):
        self.shape, self.left, self.right = x.shape, left, right
        self.diff = x[left] - x[right]
        self.dist = np.sqrt(np.sum(self.diff * self.diff, axis=1))
        return self.dist

    def backward(self, grad):
        with np.errstate(divide='ignore', invalid='ignore'):
            unit = np.where(self.dist[:, None] > 0, self.diff / self.dist[:, None], 0)
        contrib = grad[:, None] * unit
        g = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(g, self.left, contrib)
        np.add.at(g, self.right, -contrib)
        return (g,)


# ---------------------------------------------------------------------------
# Functional API
# ---------------------------------------------------------------------------

def add(a, b) -> DenseTensor:
    return Add.apply(a, b)


def sub(a, b) -> DenseTensor:
    return Sub.apply(a, b)


def mul(a, b) -> DenseTensor:
    return Mul.apply(a, b)


def div(a, b) -> DenseTensor:
    return Div.apply(a, b)


def power(base, exponent) -> DenseTensor:
    return Power.apply(base, exponent)


def relu(x) -> DenseTensor:
    return Relu.apply(x)


def sigmoid(x) -> DenseTensor:
    return Sigmoid.apply(x)


def sqrt(x) -> DenseTensor:
    return Sqrt.apply(x)


def clamp_min(x, floor: float) -> DenseTensor:
    return ClampMin.apply(x, floor=floor)


def tensor_sum(x, axis=None, keepdims: bool = False) -> DenseTensor:
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False) -> DenseTensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def tensor_max(x, axis: int) -> DenseTensor:
    return Max.apply(x, axis=axis)


def reshape(x, shape) -> DenseTensor:
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x, axes=None) -> DenseTensor:
    return Transpose.apply(x, axes=None if axes is None else tuple(axes))


def matmul(a, b) -> DenseTensor:
    return MatMul.apply(a, b)


def concat(tensors: Sequence[DenseTensor], axis: int = 0) -> DenseTensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        for ax, (x, y) in enumerate(zip(ref, t.shape)):
            if ax != axis % len(ref) and x != y:
                raise ShapeMismatchError(f"concat: axis {ax} differs ({x} vs {y})")
    return Concat.apply(*tensors, axis=axis)


def concat_channels(tensors: Sequence[DenseTensor]) -> DenseTensor:
    """Concatenate along the channel axis (last axis for row features)."""
    return concat(tensors, axis=-1)


def take_rows(x, index: np.ndarray) -> DenseTensor:
    return TakeRows.apply(x, index=np.asarray(index, dtype=np.int64))


def scatter_rows(x, index: np.ndarray, n: int) -> DenseTensor:
    return ScatterRows.apply(x, index=np.asarray(index, dtype=np.int64), n=int(n))


def segment_sum(x, segments: np.ndarray, n: int) -> DenseTensor:
    return scatter_rows(x, segments, n)


def segment_mean(x, segments: np.ndarray, n: int) -> DenseTensor:
    segments = np.asarray(segments, dtype=np.int64)
    counts = np.bincount(segments, minlength=n).astype(_dtype)
    if np.any(counts == 0):
        raise ShapeMismatchError("segment_mean: a segment has no rows")
    return div(segment_sum(x, segments, n), counts.reshape((n,) + (1,) * (as_tensor(x).ndim - 1)))


def segment_max(x, segments: np.ndarray, n: int) -> DenseTensor:
    return SegmentMax.apply(x, segments=np.asarray(segments, dtype=np.int64), n=int(n))


def row_distance(x, left: np.ndarray, right: np.ndarray) -> DenseTensor:
    return RowDistance.apply(x, left=np.asarray(left, dtype=np.int64), right=np.asarray(right, dtype=np.int64))


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> DenseTensor:
    """x / ||x|| along `axis`; the norm is floored at eps."""
    x = as_tensor(x)
    norm = sqrt(tensor_sum(mul(x, x), axis=axis, keepdims=True))
    return div(x, clamp_min(norm, eps))
