"""
Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation is a `Function` subclass with a `forward` over
NumPy arrays and a `backward` returning one gradient per parent. `Function.apply`
wraps the result in a `Tensor` that remembers its producing node, so calling
`backward()` on a scalar walks the graph in reverse topological order.

Layout convention is channels-last: images are H x W x C, clips T x H x W x C,
2D kernels kh x kw x Cin x Cout and 3D kernels kt x kh x kw x Cin x Cout.
"""

import itertools
import logging
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import DataValidationError, DimensionError, UsageError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]


class MacTally:
    """Multiply-accumulate counts reported by ops while a tally is active."""

    def __init__(self):
        self.entries: List[Tuple[str, str, int]] = []

    def add(self, scope: str, op: str, macs: int) -> None:
        self.entries.append((scope, op, int(macs)))

    @property
    def total(self) -> int:
        return sum(macs for _, _, macs in self.entries)

    def by_scope(self) -> Dict[str, int]:
        totals: Dict[str, int] = {}
        for scope, _, macs in self.entries:
            totals[scope] = totals.get(scope, 0) + macs
        return totals


_active_tally: ContextVar[Optional[MacTally]] = ContextVar("active_tally", default=None)
_active_scope: ContextVar[str] = ContextVar("active_scope", default="model")


@contextmanager
def count_macs():
    """Collect MAC counts of every conv, linear and matmul run inside the block."""
    tally = MacTally()
    token = _active_tally.set(tally)
    try:
        yield tally
    finally:
        _active_tally.reset(token)


@contextmanager
def mac_scope(name: str):
    token = _active_scope.set(name)
    try:
        yield
    finally:
        _active_scope.reset(token)


def _record_macs(op: str, macs: int) -> None:
    tally = _active_tally.get()
    if tally is not None:
        tally.add(_active_scope.get(), op, macs)


class Function:
    """
    Base class for differentiable operations.

    `forward` receives the parents' data arrays, `backward` receives the gradient of
    the loss with respect to the output and returns one array (or None) per parent.
    """

    def __init__(self, *parents: "Tensor"):
        self.parents = parents

    def forward(self, *args: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *parents: "Tensor", **kwargs: Any) -> "Tensor":
        fn = cls(*parents)
        out_data = fn.forward(*(p.data for p in parents), **kwargs)
        requires_grad = any(p.requires_grad for p in parents)
        return Tensor(out_data, requires_grad=requires_grad, node=fn if requires_grad else None)

    @staticmethod
    def unbroadcast(grad: np.ndarray, to_shape: Tuple[int, ...]) -> np.ndarray:
        """Sum out broadcast dimensions so `grad` matches `to_shape`."""
        if grad.shape == to_shape:
            return grad
        while grad.ndim > len(to_shape):
            grad = grad.sum(axis=0)
        for axis, size in enumerate(to_shape):
            if size == 1 and grad.shape[axis] != 1:
                grad = grad.sum(axis=axis, keepdims=True)
        return grad


class Tensor:
    """A float64 array with an optional gradient buffer and autodiff node."""

    __array_priority__ = 100

    def __init__(self, data: ArrayLike, requires_grad: bool = False, node: Optional[Function] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node = node

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self) -> None:
        """Populate gradients of every tensor in the graph that requires them."""
        if self.data.ndim != 0:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward() called on a tensor that does not require grad")

        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            tensor, expanded = stack.pop()
            if expanded:
                order.append(tensor)
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            if tensor.node is not None:
                for parent in tensor.node.parents:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))

        self.accumulate_grad(np.ones_like(self.data))
        for tensor in reversed(order):
            if tensor.node is None or tensor.grad is None:
                continue
            parent_grads = tensor.node.backward(tensor.grad)
            for parent, grad in zip(tensor.node.parents, parent_grads):
                if grad is not None and parent.requires_grad:
                    parent.accumulate_grad(grad)

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __neg__(self): return Neg.apply(self)
    def __truediv__(self, scalar: float): return mul(self, 1.0 / float(scalar))
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return GetItem.apply(self, index=index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return Sum.apply(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def transpose(self, *axes) -> "Tensor":
        return Transpose.apply(self, axes=axes or None)

    @property
    def T(self) -> "Tensor":
        return self.transpose()


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise DimensionError(f"shapes {a.shape} and {b.shape} are not broadcastable") from e


class Add(Function):
    def forward(self, a, b):
        _check_broadcast(a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        _check_broadcast(a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _check_broadcast(a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (self.unbroadcast(grad * self.b, self.a.shape),
                self.unbroadcast(grad * self.a, self.b.shape))


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Maximum(Function):
    def forward(self, a, b):
        _check_broadcast(a, b)
        self.shapes = (a.shape, b.shape)
        self.first = a >= b
        return np.maximum(a, b)

    def backward(self, grad):
        return (self.unbroadcast(np.where(self.first, grad, 0.0), self.shapes[0]),
                self.unbroadcast(np.where(self.first, 0.0, grad), self.shapes[1]))


def add(a, b) -> Tensor:
    return Add.apply(as_tensor(a), as_tensor(b))


def sub(a, b) -> Tensor:
    return Sub.apply(as_tensor(a), as_tensor(b))


def mul(a, b) -> Tensor:
    return Mul.apply(as_tensor(a), as_tensor(b))


def maximum(a, b) -> Tensor:
    return Maximum.apply(as_tensor(a), as_tensor(b))


def broadcast_mul(x: Tensor, weights: Tensor) -> Tensor:
    """Scale the trailing (channel) axes of `x` by `weights`."""
    if weights.ndim > x.ndim or x.shape[x.ndim - weights.ndim:] != weights.shape:
        raise DimensionError(f"cannot broadcast weights {weights.shape} over channels of {x.shape}")
    return mul(x, weights)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ez = np.exp(x[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Sigmoid(Function):
    def forward(self, x):
        self.out = _sigmoid(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Tanh(Function):
    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out ** 2),)


class Relu(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad):
        return (np.where(self.mask, grad, 0.0),)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def tanh(x: Tensor) -> Tensor:
    return Tanh.apply(x)


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


class Softmax(Function):
    def forward(self, x, axis=-1):
        if x.ndim == 0 or x.shape[axis] == 0:
            raise DimensionError(f"softmax over an empty axis {axis} of shape {x.shape}")
        self.axis = axis
        shifted = np.exp(x - x.max(axis=axis, keepdims=True))
        self.out = shifted / shifted.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        inner = (grad * self.out).sum(axis=self.axis, keepdims=True)
        return (self.out * (grad - inner),)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


class GuardedNormalize(Function):
    """x / max(||x||_2, eps) along the last axis."""

    def forward(self, x, eps=1e-12):
        self.eps = eps
        self.norm = np.sqrt((x ** 2).sum(axis=-1, keepdims=True))
        self.out = x / np.maximum(self.norm, eps)
        return self.out

    def backward(self, grad):
        safe = np.maximum(self.norm, self.eps)
        radial = (grad * self.out).sum(axis=-1, keepdims=True)
        guarded = self.norm > self.eps
        return (np.where(guarded, (grad - self.out * radial) / safe, grad / self.eps),)


def guarded_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    return GuardedNormalize.apply(x, eps=eps)


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------

class Sum(Function):
    def forward(self, x, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape).copy(),)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(x.sum(axis=axis, keepdims=keepdims), 1.0 / count)


class Reshape(Function):
    def forward(self, x, shape=()):
        self.shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError as e:
            raise DimensionError(f"cannot reshape {x.shape} into {shape}") from e

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


class GetItem(Function):
    def forward(self, x, index=None):
        self.shape, self.index = x.shape, index
        return np.array(x[index])

    def backward(self, grad):
        full = np.zeros(self.shape)
        np.add.at(full, self.index, grad)
        return (full,)


class Concat(Function):
    def forward(self, *arrays, axis=-1):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        try:
            return np.concatenate(arrays, axis=axis)
        except ValueError as e:
            raise DimensionError(f"cannot concatenate shapes {[a.shape for a in arrays]}") from e

    def backward(self, grad):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


class Stack(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        try:
            return np.stack(arrays, axis=axis)
        except ValueError as e:
            raise DimensionError(f"cannot stack shapes {[a.shape for a in arrays]}") from e

    def backward(self, grad):
        return tuple(np.moveaxis(grad, self.axis, 0))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    return Concat.apply(*[as_tensor(t) for t in tensors], axis=axis)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    return Stack.apply(*[as_tensor(t) for t in tensors], axis=axis)


def avg_pool_spatial(x: Tensor) -> Tensor:
    """Average an H x W x C map over its spatial axes."""
    return mean(x, axis=(0, 1))


def avg_pool_words(words: Tensor) -> Tensor:
    """Average N x C word features into one C vector."""
    return mean(words, axis=0)


class Embedding(Function):
    def forward(self, weight, ids=None):
        self.shape, self.ids = weight.shape, np.asarray(ids, dtype=np.int64)
        return weight[self.ids]

    def backward(self, grad):
        full = np.zeros(self.shape)
        np.add.at(full, self.ids, grad)
        return (full,)


def embedding(weight: Tensor, ids: Sequence[int]) -> Tensor:
    return Embedding.apply(weight, ids=ids)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul needs M x K and K x P matrices, got {a.shape} and {b.shape}")
        self.a, self.b = a, b
        _record_macs("matmul", a.shape[0] * a.shape[1] * b.shape[1])
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


def matmul(a, b) -> Tensor:
    return MatMul.apply(as_tensor(a), as_tensor(b))


class Linear(Function):
    def forward(self, x, weight, bias=None):
        if weight.ndim != 2 or x.ndim == 0 or x.shape[-1] != weight.shape[0]:
            raise DimensionError(f"linear expects ... x {weight.shape[0]} input, got {x.shape}")
        if bias is not None and bias.shape != (weight.shape[1],):
            raise DimensionError(f"bias {bias.shape} does not match weight {weight.shape}")
        self.x, self.weight, self.has_bias = x, weight, bias is not None
        rows = x.size // weight.shape[0]
        _record_macs("linear", rows * weight.shape[0] * weight.shape[1])
        out = x @ weight
        return out + bias if bias is not None else out

    def backward(self, grad):
        cin, cout = self.weight.shape
        x2 = self.x.reshape(-1, cin)
        g2 = grad.reshape(-1, cout)
        grads = [(g2 @ self.weight.T).reshape(self.x.shape), x2.T @ g2]
        if self.has_bias:
            grads.append(g2.sum(axis=0))
        return tuple(grads)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if bias is None:
        return Linear.apply(x, weight)
    return Linear.apply(x, weight, bias)


class Convolution(Function):
    """Channels-last N-d cross-correlation; nd is inferred from the kernel rank."""

    def forward(self, x, kernel, stride=(1,), padding=(0,)):
        nd = kernel.ndim - 2
        if x.ndim != nd + 1:
            raise DimensionError(f"conv{nd}d expects a rank-{nd + 1} input, got {x.shape}")
        if x.shape[-1] != kernel.shape[-2]:
            raise DimensionError(f"input has {x.shape[-1]} channels, kernel {kernel.shape} expects {kernel.shape[-2]}")
        ksize = kernel.shape[:nd]
        padded = np.pad(x, [(p, p) for p in padding] + [(0, 0)])
        for axis in range(nd):
            if ksize[axis] > padded.shape[axis]:
                raise DimensionError(f"kernel {kernel.shape} larger than padded input {padded.shape}")
        windows = sliding_window_view(padded, ksize, axis=tuple(range(nd)))
        windows = windows[tuple(slice(None, None, s) for s in stride)]
        self.x_shape, self.padded_shape = x.shape, padded.shape
        self.kernel, self.windows = kernel, windows
        self.nd, self.stride, self.padding = nd, stride, padding

        out_spatial = windows.shape[:nd]
        cin, cout = kernel.shape[-2], kernel.shape[-1]
        _record_macs(f"conv{nd}d", int(np.prod(out_spatial)) * int(np.prod(ksize)) * cin * cout)
        return np.tensordot(windows, np.moveaxis(kernel, nd, 0), axes=nd + 1)

    def backward(self, grad):
        nd = self.nd
        out_axes = list(range(nd))
        grad_kernel = np.moveaxis(np.tensordot(self.windows, grad, axes=(out_axes, out_axes)), 0, nd)

        grad_padded = np.zeros(self.padded_shape)
        out_spatial = grad.shape[:nd]
        for offset in itertools.product(*(range(k) for k in self.kernel.shape[:nd])):
            region = tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, self.stride, out_spatial))
            grad_padded[region] += grad @ self.kernel[offset].T
        crop = tuple(slice(p, p + n) for p, n in zip(self.padding, self.x_shape[:nd]))
        return grad_padded[crop], grad_kernel


def _per_axis(value, nd: int) -> Tuple[int, ...]:
    if isinstance(value, int):
        return (value,) * nd
    value = tuple(int(v) for v in value)
    if len(value) != nd:
        raise DimensionError(f"expected {nd} values, got {value}")
    return value


def conv1d(x: Tensor, kernel: Tensor, stride=1, padding=0) -> Tensor:
    return Convolution.apply(x, kernel, stride=_per_axis(stride, 1), padding=_per_axis(padding, 1))


def conv2d(x: Tensor, kernel: Tensor, stride=1, padding=0) -> Tensor:
    return Convolution.apply(x, kernel, stride=_per_axis(stride, 2), padding=_per_axis(padding, 2))


def conv3d(x: Tensor, kernel: Tensor, stride_thw=1, padding_thw=0) -> Tensor:
    return Convolution.apply(x, kernel, stride=_per_axis(stride_thw, 3), padding=_per_axis(padding_thw, 3))


def _interpolation_matrix(n: int) -> np.ndarray:
    """Corner-aligned linear interpolation from n samples to 2n samples."""
    m = 2 * n
    matrix = np.zeros((m, n))
    if n == 1:
        matrix[:, 0] = 1.0
        return matrix
    position = np.arange(m) * (n - 1) / (m - 1)
    low = np.minimum(np.floor(position).astype(np.int64), n - 2)
    frac = position - low
    rows = np.arange(m)
    matrix[rows, low] = 1.0 - frac
    matrix[rows, low + 1] += frac
    return matrix


class UpsampleBilinear2x(Function):
    def forward(self, x):
        if x.ndim != 3 or x.shape[0] < 1 or x.shape[1] < 1:
            raise DimensionError(f"upsample expects H x W x C with H, W >= 1, got {x.shape}")
        self.rows = _interpolation_matrix(x.shape[0])
        self.cols = _interpolation_matrix(x.shape[1])
        return np.einsum("ah,bw,hwc->abc", self.rows, self.cols, x)

    def backward(self, grad):
        return (np.einsum("ah,bw,abc->hwc", self.rows, self.cols, grad),)


def upsample_bilinear_2x(x: Tensor) -> Tensor:
    return UpsampleBilinear2x.apply(x)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

class BceWithLogits(Function):
    def forward(self, logits, target=None):
        if target.shape != logits.shape:
            raise DimensionError(f"target {target.shape} does not match logits {logits.shape}")
        if not np.all((target == 0) | (target == 1)):
            raise DataValidationError("bce_with_logits target must be binary")
        self.logits, self.target = logits, target
        losses = np.maximum(logits, 0.0) - logits * target + np.log1p(np.exp(-np.abs(logits)))
        return np.asarray(losses.mean())

    def backward(self, grad):
        return (grad * (_sigmoid(self.logits) - self.target) / self.logits.size,)


def bce_with_logits(logits: Tensor, target: Union[Tensor, np.ndarray]) -> Tensor:
    target = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    return BceWithLogits.apply(logits, target=target)
