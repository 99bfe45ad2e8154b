"""
Descriptor extraction branches: the sparse point-cloud feature pyramid, the
image CNN, channel attention and the fusion block.
"""
import logging
import math
from typing import List, Optional

import numpy as np

from config import NetworkConfig
from errors import ShapeMismatchError
from models.functional import channel_conv1d
from models.layers import BatchNorm, Conv2d, ConvBlock, Linear, Module, SparseConv, SparseTransposedConv
from models.sparse import SparseVoxelTensor, coordinate_aligned_add
from models.tensor import (DenseTensor, Parameter, add, as_tensor, concat_channels, get_dtype, mean, mul,
                           relu, reshape, segment_mean, sigmoid, take_rows)

logger = logging.getLogger(__name__)

MIN_IMAGE_SIZE = 32


def eca_kernel_size(channels: int) -> int:
    """Adaptive odd kernel size: |log2(C) / 2 + 1/2| rounded to the nearest odd integer."""
    t = int(abs(math.log2(channels) / 2 + 0.5))
    return t if t % 2 else t + 1


class ChannelAttention(Module):
    """Efficient channel attention: sigmoid(conv1d(global average)) scales each channel."""

    def __init__(self, channels: int, rng: np.random.Generator, kernel_size: Optional[int] = None):
        super().__init__()
        self.kernel_size = kernel_size or eca_kernel_size(channels)
        bound = 1.0 / math.sqrt(self.kernel_size)
        self.weight = Parameter(rng.uniform(-bound, bound, size=self.kernel_size).astype(get_dtype()))

    def attention(self, averages: DenseTensor) -> DenseTensor:
        return sigmoid(channel_conv1d(averages, self.weight))

    def forward(self, x, n_items: Optional[int] = None):
        if isinstance(x, SparseVoxelTensor):
            n = x.n_items if n_items is None else n_items
            scale = self.attention(segment_mean(x.features, x.batch_index, n))
            return x.replace_features(mul(x.features, take_rows(scale, x.batch_index)))
        x = as_tensor(x)
        scale = self.attention(mean(x, axis=(2, 3)))
        return mul(x, reshape(scale, scale.shape + (1, 1)))


class ResidualBlock(Module):
    """conv-BN-ReLU, conv-BN, channel attention, add skip, ReLU."""

    def __init__(self, channels: int, rng: np.random.Generator, eca_kernel: Optional[int] = None):
        super().__init__()
        self.conv1 = ConvBlock(channels, channels, 3, 1, rng)
        self.conv2 = ConvBlock(channels, channels, 3, 1, rng, activation=False)
        self.eca = ChannelAttention(channels, rng, eca_kernel)

    def forward(self, x: SparseVoxelTensor, n_items: int) -> SparseVoxelTensor:
        y = self.eca(self.conv2(self.conv1(x)), n_items)
        return x.replace_features(relu(add(y.features, x.features)))


class DownBlock(Module):
    """Stride-2 K=2 conv block followed by a residual block."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 eca_kernel: Optional[int] = None):
        super().__init__()
        self.down = ConvBlock(in_channels, out_channels, 2, 2, rng)
        self.res = ResidualBlock(out_channels, rng, eca_kernel)

    def forward(self, x: SparseVoxelTensor, n_items: int) -> SparseVoxelTensor:
        return self.res(self.down(x), n_items)


class PointCloudFPN(Module):
    """Sparse feature pyramid over a quantized cloud.

    Channel list [c0, .., c(L-1)] gives conv0 (K=5) and L-1 downsampling blocks;
    laterals reduce the last two block outputs to k channels and the top one is
    upsampled onto the coordinates of the one below.
    """

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        super().__init__()
        channels = list(cfg.pc_channels)
        self.depth = len(channels)
        self.conv0 = ConvBlock(1, channels[0], 5, 1, rng)
        for i in range(1, self.depth):
            setattr(self, f'conv{i}', DownBlock(channels[i - 1], channels[i], rng, cfg.eca_kernel))
        low, top = self.depth - 2, self.depth - 1
        setattr(self, f'lateral{low}', SparseConv(channels[low], cfg.k, 1, 1, rng, bias=True))
        setattr(self, f'lateral{top}', SparseConv(channels[top], cfg.k, 1, 1, rng, bias=True))
        setattr(self, f'tconv{top}', SparseTransposedConv(cfg.k, cfg.k, 2, 2, rng, bias=True))
        self.output_stride = 2 ** low

    def block_outputs(self, x: SparseVoxelTensor, n_items: Optional[int] = None) -> List[SparseVoxelTensor]:
        n = x.n_items if n_items is None else n_items
        outputs = [self.conv0(x)]
        for i in range(1, self.depth):
            outputs.append(getattr(self, f'conv{i}')(outputs[-1], n))
        return outputs

    def forward(self, x: SparseVoxelTensor, n_items: Optional[int] = None) -> SparseVoxelTensor:
        if x.channels != 1:
            raise ShapeMismatchError(f"point-cloud branch expects 1 input channel, got {x.channels}")
        outputs = self.block_outputs(x, n_items)
        low, top = self.depth - 2, self.depth - 1
        upper = getattr(self, f'lateral{top}')(outputs[top])
        upsampled = getattr(self, f'tconv{top}')(upper, target=outputs[low])
        return coordinate_aligned_add(getattr(self, f'lateral{low}')(outputs[low]), upsampled)


class ImageBlock(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, 2, 1, rng)
        self.norm = BatchNorm(out_channels)

    def forward(self, x: DenseTensor) -> DenseTensor:
        return relu(self.norm(self.conv(x)))


class ImageBranch(Module):
    """Plain stride-2 CNN (conv-BN-ReLU blocks) with a 1x1 reduction to k channels."""

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        super().__init__()
        widths = [3] + list(cfg.image_channels)
        self.depth = len(cfg.image_channels)
        for i in range(self.depth):
            setattr(self, f'block{i + 1}', ImageBlock(widths[i], widths[i + 1], rng))
        self.reduce = Conv2d(widths[-1], cfg.k, 1, 1, 0, rng, bias=True)

    def forward(self, images) -> DenseTensor:
        images = as_tensor(images)
        squeeze = images.ndim == 3
        if squeeze:
            images = reshape(images, (1,) + images.shape)
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeMismatchError(f"image branch expects [B, 3, H, W] input, got shape {images.shape}")
        if images.shape[2] < MIN_IMAGE_SIZE or images.shape[3] < MIN_IMAGE_SIZE:
            raise ShapeMismatchError(
                f"image of {images.shape[2]}x{images.shape[3]} is smaller than {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}")
        x = images
        for i in range(self.depth):
            x = getattr(self, f'block{i + 1}')(x)
        out = self.reduce(x)
        return reshape(out, out.shape[1:]) if squeeze else out


class Fusion(Module):
    """Late fusion of the two unimodal descriptors with an optional head."""

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        super().__init__()
        self.mode, self.head = cfg.fusion_mode, cfg.fusion_head
        width = 2 * cfg.k if self.mode == 'concat' else cfg.k
        if self.head in ('fc', 'mlp'):
            self.fc1 = Linear(width, width, rng)
        if self.head == 'mlp':
            self.fc2 = Linear(width, width, rng)

    def forward(self, d_pc, d_rgb) -> DenseTensor:
        fused = fuse(d_pc, d_rgb, self.mode)
        if self.head == 'fc':
            fused = self.fc1(fused)
        elif self.head == 'mlp':
            fused = self.fc2(relu(self.fc1(fused)))
        return fused


def fuse(d_pc, d_rgb, mode: str = 'concat') -> DenseTensor:
    """Head-less fusion of two descriptors."""
    d_pc, d_rgb = as_tensor(d_pc), as_tensor(d_rgb)
    if d_pc.shape != d_rgb.shape:
        raise ShapeMismatchError(f"fusion: descriptor widths differ, {d_pc.shape} vs {d_rgb.shape}")
    return concat_channels([d_pc, d_rgb]) if mode == 'concat' else add(d_pc, d_rgb)
