"""Differentiable neural-network operations on top of `groupkan.tensor`."""

import logging
import math
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ConfigurationError, DimensionError
from .tensor import Function, Tensor, add, as_tensor, div, mul, sub

logger = logging.getLogger(__name__)

# Shared by layer_norm and batch_norm.
NORM_EPS = 1e-5

_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# Linear algebra


class MatMul(Function):
    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def _parse_einsum(subscripts: str) -> Tuple[str, str, str]:
    try:
        inputs, out = subscripts.replace(" ", "").split("->")
        left, right = inputs.split(",")
    except ValueError as exc:
        raise ConfigurationError(
            f"einsum needs explicit two-operand subscripts, got {subscripts!r}"
        ) from exc

    for operand in (left, right, out):
        if len(set(operand)) != len(operand):
            raise ConfigurationError(f"einsum operand {operand!r} repeats an index")
    for operand, other in ((left, right), (right, left)):
        missing = set(operand) - set(out) - set(other)
        if missing:
            raise ConfigurationError(
                f"einsum index {''.join(sorted(missing))!r} appears in one operand only"
            )
    return left, right, out


class Einsum(Function):
    """Two-operand einsum without diagonals or single-operand reductions."""

    def forward(self, a: np.ndarray, b: np.ndarray, subscripts: str) -> np.ndarray:
        self.left, self.right, self.out = _parse_einsum(subscripts)
        self.a, self.b = a, b
        try:
            return np.einsum(subscripts, a, b, optimize=True)
        except ValueError as exc:
            raise DimensionError(
                f"einsum {subscripts!r} cannot combine shapes {a.shape} and {b.shape}"
            ) from exc

    def backward(self, grad):
        grad_a = np.einsum(f"{self.out},{self.right}->{self.left}", grad, self.b, optimize=True)
        grad_b = np.einsum(f"{self.out},{self.left}->{self.right}", grad, self.a, optimize=True)
        return grad_a, grad_b


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    return Einsum.apply(a, b, subscripts=subscripts)


# Convolutions (cross-correlation, no kernel flip)


def _conv_geometry(x_shape, kernel: int, stride: int, padding: int) -> Tuple[int, int]:
    if stride < 1:
        raise DimensionError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise DimensionError(f"padding must be >= 0, got {padding}")
    height, width = x_shape[2] + 2 * padding, x_shape[3] + 2 * padding
    if kernel > height or kernel > width:
        raise DimensionError(
            f"kernel {kernel}x{kernel} is larger than padded input {height}x{width}"
        )
    return (height - kernel) // stride + 1, (width - kernel) // stride + 1


def _windows(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    """(B, C, H', W', k, k) view of the padded input."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    return windows[:, :, ::stride, ::stride]


def _scatter_windows(
    grad_windows_fn, x_shape, kernel: int, stride: int, padding: int, out_hw: Tuple[int, int]
) -> np.ndarray:
    """Accumulate per-offset input gradients back into the input layout."""
    batch, channels, height, width = x_shape
    out_h, out_w = out_hw
    padded = np.zeros((batch, channels, height + 2 * padding, width + 2 * padding))
    for i in range(kernel):
        for j in range(kernel):
            padded[
                :,
                :,
                i : i + stride * out_h : stride,
                j : j + stride * out_w : stride,
            ] += grad_windows_fn(i, j)
    if padding:
        padded = padded[:, :, padding:-padding, padding:-padding]
    return padded


class Conv2d(Function):
    def forward(self, x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
        if x.ndim != 4 or w.ndim != 4:
            raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
        if w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3]:
            raise DimensionError(f"conv2d weight {w.shape} does not fit input {x.shape}")
        kernel = w.shape[2]
        self.out_hw = _conv_geometry(x.shape, kernel, stride, padding)
        self.x_shape, self.w = x.shape, w
        self.kernel, self.stride, self.padding = kernel, stride, padding

        self.windows = _windows(x, kernel, stride, padding)
        out = np.tensordot(self.windows, w, axes=([1, 4, 5], [1, 2, 3]))
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, grad):
        grad_w = np.tensordot(grad, self.windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_x = _scatter_windows(
            lambda i, j: np.einsum("bohw,oc->bchw", grad, self.w[:, :, i, j]),
            self.x_shape,
            self.kernel,
            self.stride,
            self.padding,
            self.out_hw,
        )
        return grad_x, grad_w


class DepthwiseConv2d(Function):
    def forward(self, x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
        if x.ndim != 4 or w.ndim != 4:
            raise DimensionError(
                f"depthwise_conv2d expects 4-d input and weight, got {x.shape}, {w.shape}"
            )
        if w.shape[0] != x.shape[1] or w.shape[1] != 1 or w.shape[2] != w.shape[3]:
            raise DimensionError(f"depthwise weight {w.shape} does not fit input {x.shape}")
        kernel = w.shape[2]
        self.out_hw = _conv_geometry(x.shape, kernel, stride, padding)
        self.x_shape, self.w = x.shape, w[:, 0]
        self.kernel, self.stride, self.padding = kernel, stride, padding

        self.windows = _windows(x, kernel, stride, padding)
        return np.einsum("bchwij,cij->bchw", self.windows, self.w)

    def backward(self, grad):
        grad_w = np.einsum("bchw,bchwij->cij", grad, self.windows)[:, None]
        grad_x = _scatter_windows(
            lambda i, j: grad * self.w[:, i, j][None, :, None, None],
            self.x_shape,
            self.kernel,
            self.stride,
            self.padding,
            self.out_hw,
        )
        return grad_x, grad_w


def conv2d(
    x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0
) -> Tensor:
    out = Conv2d.apply(x, w, stride=stride, padding=padding)
    if bias is not None:
        out = add(out, bias.reshape(-1, 1, 1))
    return out


def depthwise_conv2d(
    x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0
) -> Tensor:
    out = DepthwiseConv2d.apply(x, w, stride=stride, padding=padding)
    if bias is not None:
        out = add(out, bias.reshape(-1, 1, 1))
    return out


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


# Normalization


class LayerNorm(Function):
    def forward(
        self, x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float
    ) -> np.ndarray:
        channels = x.shape[-1]
        if gamma.shape != (channels,) or beta.shape != (channels,):
            raise DimensionError(
                f"layer_norm over {channels} channels got gamma {gamma.shape}, beta {beta.shape}"
            )
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + eps)
        self.x_hat = (x - mean) * self.inv_std
        self.gamma = gamma
        return self.x_hat * gamma + beta

    def backward(self, grad):
        lead_axes = tuple(range(grad.ndim - 1))
        grad_gamma = np.sum(grad * self.x_hat, axis=lead_axes)
        grad_beta = np.sum(grad, axis=lead_axes)

        g_hat = grad * self.gamma
        n = self.x_hat.shape[-1]
        grad_x = (
            self.inv_std
            / n
            * (
                n * g_hat
                - g_hat.sum(axis=-1, keepdims=True)
                - self.x_hat * np.sum(g_hat * self.x_hat, axis=-1, keepdims=True)
            )
        )
        return grad_x, grad_gamma, grad_beta


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    return LayerNorm.apply(x, gamma, beta, eps=eps)


class BatchNorm(Function):
    """Per-channel normalization of a B x C x H x W map over (B, H, W)."""

    def forward(
        self,
        x: np.ndarray,
        gamma: np.ndarray,
        beta: np.ndarray,
        mean: Optional[np.ndarray],
        var: Optional[np.ndarray],
        eps: float,
    ) -> np.ndarray:
        if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
            raise DimensionError(
                f"batch_norm input {x.shape} does not fit gamma {gamma.shape}, beta {beta.shape}"
            )
        self.use_batch_stats = mean is None
        if self.use_batch_stats:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
        self.batch_mean, self.batch_var = mean, var
        self.inv_std = (1.0 / np.sqrt(var + eps))[None, :, None, None]
        self.x_hat = (x - mean[None, :, None, None]) * self.inv_std
        self.gamma = gamma[None, :, None, None]
        return self.x_hat * self.gamma + beta[None, :, None, None]

    def backward(self, grad):
        axes = (0, 2, 3)
        grad_gamma = np.sum(grad * self.x_hat, axis=axes)
        grad_beta = np.sum(grad, axis=axes)

        g_hat = grad * self.gamma
        if not self.use_batch_stats:
            return g_hat * self.inv_std, grad_gamma, grad_beta

        n = grad.shape[0] * grad.shape[2] * grad.shape[3]
        grad_x = (
            self.inv_std
            / n
            * (
                n * g_hat
                - g_hat.sum(axis=axes, keepdims=True)
                - self.x_hat * np.sum(g_hat * self.x_hat, axis=axes, keepdims=True)
            )
        )
        return grad_x, grad_gamma, grad_beta


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
    eps: float = NORM_EPS,
) -> Tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalize with batch statistics, or with the given running statistics.

    Returns the output and the mean/variance that were used.
    """
    out = BatchNorm.apply(x, gamma, beta, mean=running_mean, var=running_var, eps=eps)
    return out, x.data.mean(axis=(0, 2, 3)), x.data.var(axis=(0, 2, 3))


# Pooling and resampling


class MaxPool2d(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        batch, channels, height, width = x.shape
        if height % 2 or width % 2:
            raise DimensionError(f"max_pool2d needs even spatial extents, got {height}x{width}")
        blocks = x.reshape(batch, channels, height // 2, 2, width // 2, 2)
        blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(
            batch, channels, height // 2, width // 2, 4
        )
        self.x_shape = x.shape
        self.argmax = blocks.argmax(axis=-1)
        return np.take_along_axis(blocks, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        batch, channels, height, width = self.x_shape
        blocks = np.zeros(grad.shape + (4,))
        np.put_along_axis(blocks, self.argmax[..., None], grad[..., None], axis=-1)
        blocks = blocks.reshape(batch, channels, height // 2, width // 2, 2, 2)
        return (blocks.transpose(0, 1, 2, 4, 3, 5).reshape(self.x_shape),)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2."""
    return MaxPool2d.apply(x)


class UpsampleNearest2d(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, grad):
        batch, channels, height, width = grad.shape
        blocks = grad.reshape(batch, channels, height // 2, 2, width // 2, 2)
        return (blocks.sum(axis=(3, 5)),)


def upsample_nearest2d(x: Tensor) -> Tensor:
    """2x nearest-neighbour upsampling."""
    return UpsampleNearest2d.apply(x)


# Elementwise nonlinearities


class Relu(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.mask = x > 0
        return np.where(self.mask, x, 0.0)

    def backward(self, grad):
        return (grad * self.mask,)


class Sigmoid(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.out = _sigmoid(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Silu(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        self.sig = _sigmoid(x)
        return x * self.sig

    def backward(self, grad):
        return (grad * self.sig * (1.0 + self.x * (1.0 - self.sig)),)


class Gelu(Function):
    """Exact GELU, x * Phi(x)."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        self.cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
        return x * self.cdf

    def backward(self, grad):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * self.x * self.x)
        return (grad * (self.cdf + self.x * pdf),)


class Softplus(Function):
    def forward(self, x: np.ndarray) -> np.ndarray:
        self.x = x
        return np.logaddexp(0.0, x)

    def backward(self, grad):
        return (grad * _sigmoid(self.x),)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, in both branches
    exp_neg = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + exp_neg), exp_neg / (1.0 + exp_neg))


def relu(x: Tensor) -> Tensor:
    return Relu.apply(x)


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def silu(x: Tensor) -> Tensor:
    return Silu.apply(x)


def gelu(x: Tensor) -> Tensor:
    return Gelu.apply(x)


def softplus(x: Tensor) -> Tensor:
    return Softplus.apply(x)


def identity(x: Tensor) -> Tensor:
    return x


UNARY_OPS = {
    "relu": relu,
    "gelu": gelu,
    "silu": silu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "identity": identity,
}

BINARY_OPS = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, *operands) -> Tensor:
    """Apply a named pointwise operation."""
    if op in UNARY_OPS:
        if len(operands) != 1:
            raise ConfigurationError(f"{op} takes one operand, got {len(operands)}")
        return UNARY_OPS[op](as_tensor(operands[0]))
    if op in BINARY_OPS:
        if len(operands) != 2:
            raise ConfigurationError(f"{op} takes two operands, got {len(operands)}")
        return BINARY_OPS[op](*operands)
    raise ConfigurationError(f"Unknown elementwise op {op!r}")


def activation(kind: str):
    """Look up a unary activation by name."""
    try:
        return UNARY_OPS[kind]
    except KeyError:
        raise ConfigurationError(f"Unknown activation {kind!r}") from None
