"""
Dense convolution, channel convolution, batch normalization and the by-name
elementwise op dispatch, all on the tape.
"""
from typing import Optional, Tuple

import numpy as np

from errors import ConfigError, ShapeMismatchError
from models.tensor import (DenseTensor, Function, add, as_tensor, concat_channels, l2_normalize, mean, mul, power,
                           relu, reshape, sigmoid, sub)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class Conv2d(Function):
    """Cross-correlation over [B, C, H, W] with a [C_out, C_in, kh, kw] kernel.

    The output is accumulated one kernel tap at a time: an einsum of the tap's
    [C_out, C_in] slice with the strided input window it touches.
    """

    def forward(self, x, kernel, stride=1, padding=0):
        _, c_in, h, w = x.shape
        c_out, k_in, kh, kw = kernel.shape
        if k_in != c_in:
            raise ShapeMismatchError(f"conv2d: input axis 1 (channels) has {c_in}, kernel axis 1 expects {k_in}")
        if h + 2 * padding < kh:
            raise ShapeMismatchError(f"conv2d: input axis 2 (height) {h} with padding {padding} is smaller than kernel {kh}")
        if w + 2 * padding < kw:
            raise ShapeMismatchError(f"conv2d: input axis 3 (width) {w} with padding {padding} is smaller than kernel {kw}")
        self.stride, self.padding = stride, padding
        self.x_shape = x.shape
        self.xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        self.kernel = kernel
        self.ho = conv_output_size(h, kh, stride, padding)
        self.wo = conv_output_size(w, kw, stride, padding)
        out = np.zeros((x.shape[0], c_out, self.ho, self.wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                out += np.einsum('oc,bchw->bohw', kernel[:, :, i, j], self._window(self.xp, i, j))
        return out

    def _window(self, arr, i, j):
        s = self.stride
        return arr[:, :, i:i + s * (self.ho - 1) + 1:s, j:j + s * (self.wo - 1) + 1:s]

    def backward(self, grad):
        kh, kw = self.kernel.shape[2:]
        g_kernel = np.zeros_like(self.kernel)
        g_xp = np.zeros_like(self.xp)
        for i in range(kh):
            for j in range(kw):
                g_kernel[:, :, i, j] = np.einsum('bohw,bchw->oc', grad, self._window(self.xp, i, j))
                self._window(g_xp, i, j)[...] += np.einsum('oc,bohw->bchw', self.kernel[:, :, i, j], grad)
        p = self.padding
        g_x = g_xp[:, :, p:p + self.x_shape[2], p:p + self.x_shape[3]] if p else g_xp
        return g_x, g_kernel


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> DenseTensor:
    """2D convolution; accepts [C, H, W] or [B, C, H, W] input."""
    x = as_tensor(x)
    if x.ndim == 3:
        out = Conv2d.apply(reshape(x, (1,) + x.shape), kernel, stride=stride, padding=padding)
        return reshape(out, out.shape[1:])
    if x.ndim != 4:
        raise ShapeMismatchError(f"conv2d: expected a 3D or 4D input, got rank {x.ndim}")
    return Conv2d.apply(x, kernel, stride=stride, padding=padding)


class ChannelConv1d(Function):
    """1D cross-correlation across the channel axis of [B, C], zero padded to keep C."""

    def forward(self, g, weight):
        k = weight.shape[0]
        self.half = k // 2
        self.c = g.shape[1]
        self.gp = np.pad(g, ((0, 0), (self.half, self.half)))
        self.weight = weight
        out = np.zeros_like(g)
        for j in range(k):
            out += weight[j] * self.gp[:, j:j + self.c]
        return out

    def backward(self, grad):
        k = self.weight.shape[0]
        g_w = np.array([np.sum(grad * self.gp[:, j:j + self.c]) for j in range(k)], dtype=grad.dtype)
        g_gp = np.zeros_like(self.gp)
        for j in range(k):
            g_gp[:, j:j + self.c] += self.weight[j] * grad
        return g_gp[:, self.half:self.half + self.c], g_w


def channel_conv1d(g, weight) -> DenseTensor:
    return ChannelConv1d.apply(g, weight)


def _reduce_axes(ndim: int, channel_axis: int) -> Tuple[int, ...]:
    return tuple(a for a in range(ndim) if a != channel_axis % ndim)


def _channel_shape(ndim: int, channel_axis: int, channels: int) -> Tuple[int, ...]:
    shape = [1] * ndim
    shape[channel_axis % ndim] = channels
    return tuple(shape)


class BatchNormTrain(Function):
    """Normalize with the statistics of the current batch."""

    def forward(self, x, gamma, beta, channel_axis=-1, eps=1e-5):
        self.axes = _reduce_axes(x.ndim, channel_axis)
        self.count = int(np.prod([x.shape[a] for a in self.axes]))
        if self.count <= 1:
            raise ShapeMismatchError(
                f"batchnorm (train): needs more than one value per channel, got shape {x.shape}")
        cshape = _channel_shape(x.ndim, channel_axis, x.shape[channel_axis])
        self.batch_mean = x.mean(axis=self.axes)
        self.batch_var = x.var(axis=self.axes)
        self.inv_std = 1.0 / np.sqrt(self.batch_var.reshape(cshape) + eps)
        self.xhat = (x - self.batch_mean.reshape(cshape)) * self.inv_std
        self.gamma = gamma.reshape(cshape)
        return self.gamma * self.xhat + beta.reshape(cshape)

    def backward(self, grad):
        g_gamma = np.sum(grad * self.xhat, axis=self.axes)
        g_beta = np.sum(grad, axis=self.axes)
        dxhat = grad * self.gamma
        n = self.count
        g_x = (self.inv_std / n) * (
            n * dxhat
            - np.sum(dxhat, axis=self.axes, keepdims=True)
            - self.xhat * np.sum(dxhat * self.xhat, axis=self.axes, keepdims=True)
        )
        return g_x, g_gamma, g_beta


def batch_norm(x, gamma, beta, running_mean: Optional[np.ndarray] = None,
               running_var: Optional[np.ndarray] = None, training: bool = True,
               momentum: float = 0.1, eps: float = 1e-5, channel_axis: Optional[int] = None) -> DenseTensor:
    """Batch normalization over every axis but the channel axis.

    Channel axis defaults to 1 for 4D image batches and to the last axis
    otherwise (sparse feature rows). In train mode the running buffers are
    updated in place (unbiased variance).
    """
    x = as_tensor(x)
    if channel_axis is None:
        channel_axis = 1 if x.ndim == 4 else -1
    channels = x.shape[channel_axis]
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeMismatchError(
            f"batchnorm: input axis {channel_axis % x.ndim} has {channels} channels, "
            f"gamma/beta have {gamma.shape}/{beta.shape}")
    if training:
        out = BatchNormTrain.apply(x, gamma, beta, channel_axis=channel_axis, eps=eps)
        if running_mean is not None and running_var is not None:
            axes = _reduce_axes(x.ndim, channel_axis)
            count = x.size // channels
            running_mean *= (1 - momentum)
            running_mean += momentum * x.values.mean(axis=axes)
            running_var *= (1 - momentum)
            running_var += momentum * x.values.var(axis=axes) * count / (count - 1)
        return out
    if running_mean is None or running_var is None:
        raise ShapeMismatchError("batchnorm (eval): running statistics are required")
    cshape = _channel_shape(x.ndim, channel_axis, channels)
    scale = 1.0 / np.sqrt(running_var.reshape(cshape) + eps)
    normalized = mul(sub(x, running_mean.reshape(cshape)), scale)
    return add(mul(normalized, reshape(gamma, cshape)), reshape(beta, cshape))


ELEMENTWISE_OPS = ('relu', 'sigmoid', 'pow', 'add', 'mul', 'mean', 'l2_normalize', 'concat_channels', 'batchnorm')


def elementwise_suite(x, op: str, *args, **kwargs) -> DenseTensor:
    """Apply one of the dense elementwise / reduction ops by name; extra arguments go to the op.

    pow takes the exponent, add and mul the other operand, concat_channels the
    remaining tensors, batchnorm (gamma, beta[, running_mean, running_var]) and
    `training`.
    """
    if op == 'relu':
        return relu(x)
    if op == 'sigmoid':
        return sigmoid(x)
    if op == 'pow':
        return power(x, *args)
    if op == 'add':
        return add(x, *args)
    if op == 'mul':
        return mul(x, *args)
    if op == 'mean':
        return mean(x, *args, **kwargs)
    if op == 'l2_normalize':
        return l2_normalize(x, *args, **kwargs)
    if op == 'concat_channels':
        return concat_channels([x, *args])
    if op == 'batchnorm':
        return batch_norm(x, *args, **kwargs)
    raise ConfigError(f"unknown elementwise op {op!r}; expected one of {ELEMENTWISE_OPS}")
