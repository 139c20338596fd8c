"""Differentiable operation kinds for the tape engine.

Each class implements ``forward`` on raw arrays and ``backward`` returning one gradient per
input. Module-level helpers at the bottom (``conv2d``, ``upsample2x``, ...) are the
spelling the model and losses use.
"""

import math
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp

from core.errors import ContractError
from core.tensor import STANDARDIZE_EPS, Function, Tensor

LN2 = math.log(2.0)


def _broadcast_shape(cls: type, a: np.ndarray, b: np.ndarray) -> Tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{cls.__name__}: shape mismatch {a.shape} vs {b.shape}") from None


########### Elementwise binary ops ###########
class Add(Function):
    def forward(self, a, b):
        _broadcast_shape(type(self), a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(grad, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        _broadcast_shape(type(self), a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(-grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        _broadcast_shape(type(self), a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (self.unbroadcast(grad * self.b, self.a.shape),
                self.unbroadcast(grad * self.a, self.b.shape))


class Div(Function):
    def forward(self, a, b):
        _broadcast_shape(type(self), a, b)
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        grad_a = grad / self.b
        grad_b = -grad * self.a / (self.b * self.b)
        return self.unbroadcast(grad_a, self.a.shape), self.unbroadcast(grad_b, self.b.shape)


class Scale(Function):
    def forward(self, x, factor: float):
        self.factor = factor
        return x * factor

    def backward(self, grad):
        return (grad * self.factor,)


########### Elementwise unary ops ###########
class Pow(Function):
    def forward(self, x, exponent: int):
        if int(exponent) != exponent:
            raise ContractError(f"Pow supports integer exponents only, got {exponent}")
        self.x, self.exponent = x, int(exponent)
        return np.power(x, self.exponent)

    def backward(self, grad):
        if self.exponent == 0:
            return (np.zeros_like(self.x),)
        return (grad * self.exponent * np.power(self.x, self.exponent - 1),)


class Log(Function):
    def forward(self, x):
        self.x = x
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class Log2(Function):
    def forward(self, x):
        self.x = x
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.log2(x)

    def backward(self, grad):
        return (grad / (self.x * LN2),)


class Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, np.zeros((), dtype=x.dtype))

    def backward(self, grad):
        return (grad * self.mask,)


class Softmax(Function):
    def forward(self, x, axis: int = 1):
        shifted = np.exp(x - x.max(axis=axis, keepdims=True))
        self.axis = axis
        self.out = shifted / shifted.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    def forward(self, x, axis: int = 1):
        self.axis = axis
        self.out = (x - logsumexp(x, axis=axis, keepdims=True)).astype(x.dtype, copy=False)
        return self.out

    def backward(self, grad):
        return (grad - np.exp(self.out) * grad.sum(axis=self.axis, keepdims=True),)


class StopGradient(Function):
    """Identity forward; the backward pass hands its input an exact zero gradient."""

    def forward(self, x):
        return x.copy()

    def backward(self, grad):
        return (np.zeros_like(grad),)


########### Reductions ###########
class Sum(Function):
    def forward(self, x, axis=None, keepdims: bool = False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        return np.asarray(x.sum(axis=axis, keepdims=keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.shape),)


class Mean(Function):
    def forward(self, x, axis=None, keepdims: bool = False):
        self.shape, self.axis, self.keepdims = x.shape, axis, keepdims
        out = np.asarray(x.mean(axis=axis, keepdims=keepdims))
        self.count = x.size // max(out.size, 1)
        return out

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad / self.count, self.shape),)


########### Matrix ops ###########
class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ContractError(f"MatMul: shape mismatch {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


class Transpose(Function):
    def forward(self, x):
        if x.ndim != 2:
            raise ContractError(f"Transpose expects a matrix, got shape {x.shape}")
        return x.T.copy()

    def backward(self, grad):
        return (grad.T,)


def _require_square(cls: type, x: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ContractError(f"{cls.__name__} expects a square matrix, got shape {x.shape}")


class Trace(Function):
    def forward(self, x):
        _require_square(type(self), x)
        self.n, self.dtype = x.shape[0], x.dtype
        return np.asarray(np.trace(x))

    def backward(self, grad):
        return (grad * np.eye(self.n, dtype=self.dtype),)


class Diagonal(Function):
    def forward(self, x):
        _require_square(type(self), x)
        return np.diagonal(x).copy()

    def backward(self, grad):
        return (np.diag(grad),)


class StandardizeColumns(Function):
    """(x - column mean) / sqrt(biased column variance + eps), statistics over the batch axis."""

    def forward(self, x, eps: float = STANDARDIZE_EPS):
        if x.ndim != 2 or x.shape[0] < 2:
            raise ContractError(f"StandardizeColumns needs a b x d matrix with b >= 2, got shape {x.shape}")
        centred = x - x.mean(axis=0, keepdims=True)
        self.std = np.sqrt((centred * centred).mean(axis=0, keepdims=True) + eps)
        self.out = centred / self.std
        return self.out

    def backward(self, grad):
        y = self.out
        return ((grad - grad.mean(axis=0, keepdims=True) - y * (grad * y).mean(axis=0, keepdims=True)) / self.std,)


########### Shape ops ###########
class Reshape(Function):
    def forward(self, x, shape: Sequence[int]):
        self.in_shape = x.shape
        try:
            return x.reshape(shape)
        except ValueError:
            raise ContractError(f"Reshape: cannot view shape {x.shape} as {tuple(shape)}") from None

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Concat(Function):
    def forward(self, *arrays, axis: int = 1):
        try:
            out = np.concatenate(arrays, axis=axis)
        except ValueError:
            raise ContractError(f"Concat: incompatible shapes {[a.shape for a in arrays]} on axis {axis}") from None
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return out

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


########### Image ops ###########
class Conv2d(Function):
    """Direct 2-D convolution (cross-correlation), NCHW input and OIkk weights."""

    def forward(self, x, weight, stride: int = 1, padding: int = 1):
        if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1] or weight.shape[2] != weight.shape[3]:
            raise ContractError(f"Conv2d: shape mismatch input {x.shape} vs weight {weight.shape}")
        if stride not in (1, 2):
            raise ContractError(f"Conv2d supports stride 1 or 2, got {stride}")
        k = weight.shape[-1]
        padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        windows = sliding_window_view(padded, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        self.saved = (x.shape, padded.shape, windows, weight, stride, padding)
        return np.einsum("bchwij,ocij->bohw", windows, weight, optimize=True)

    def backward(self, grad):
        x_shape, padded_shape, windows, weight, stride, padding = self.saved
        k = weight.shape[-1]
        out_h, out_w = grad.shape[2:]
        grad_weight = np.einsum("bchwij,bohw->ocij", windows, grad, optimize=True)
        if not self.needs_input_grad[0]:
            return None, grad_weight
        grad_windows = np.einsum("bohw,ocij->bchwij", grad, weight, optimize=True)
        grad_padded = np.zeros(padded_shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                grad_padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += grad_windows[..., i, j]
        if padding:
            grad_padded = grad_padded[:, :, padding:padding + x_shape[2], padding:padding + x_shape[3]]
        return grad_padded, grad_weight


class Upsample2x(Function):
    """Nearest-neighbour 2x upsampling of an NCHW map."""

    def forward(self, x):
        if x.ndim != 4:
            raise ContractError(f"Upsample2x expects NCHW input, got shape {x.shape}")
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, grad):
        b, c, h, w = grad.shape
        return (grad.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)


########### Helpers ###########
def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: Optional[int] = None) -> Tensor:
    if padding is None:
        padding = weight.shape[-1] // 2
    out = Conv2d.apply(x, weight, stride=stride, padding=padding)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


def upsample2x(x: Tensor) -> Tensor:
    return Upsample2x.apply(x)


def global_avg_pool(x: Tensor) -> Tensor:
    return Mean.apply(x, axis=(2, 3))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def stop_gradient(x: Tensor) -> Tensor:
    return StopGradient.apply(x)