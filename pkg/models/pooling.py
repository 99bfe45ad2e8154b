"""
Global pooling of sparse or dense feature maps into one descriptor per batch item.
"""
from typing import Optional, Tuple

import numpy as np

from config import PoolingConfig
from errors import ConfigError, ShapeMismatchError
from models.layers import Module
from models.sparse import SparseVoxelTensor
from models.tensor import (DenseTensor, Parameter, as_tensor, clamp_min, div, get_dtype, power,
                           reshape, segment_max, segment_mean, transpose)

POOLING_METHODS = ('gem', 'mac', 'spoc')


def feature_rows(feature_map, n_items: Optional[int] = None) -> Tuple[DenseTensor, np.ndarray, int]:
    """Flatten a feature map into rows [N, C] plus the batch item of each row."""
    if isinstance(feature_map, SparseVoxelTensor):
        n = feature_map.n_items if n_items is None else n_items
        return feature_map.features, feature_map.batch_index, n
    feature_map = as_tensor(feature_map)
    if feature_map.ndim == 3:
        feature_map = reshape(feature_map, (1,) + feature_map.shape)
    if feature_map.ndim != 4:
        raise ShapeMismatchError(f"pooling expects a sparse map or a [B, C, H, W] map, got rank {feature_map.ndim}")
    b, c, h, w = feature_map.shape
    rows = reshape(transpose(feature_map, (0, 2, 3, 1)), (b * h * w, c))
    return rows, np.repeat(np.arange(b), h * w), b


def gem(rows, segments: np.ndarray, n: int, p, eps: float) -> DenseTensor:
    """(mean of max(x, eps)^p)^(1/p) per segment; p may be a trainable tensor."""
    pooled = segment_mean(power(clamp_min(rows, eps), p), segments, n)
    return power(pooled, div(1.0, p))


def pool_rows(rows, segments: np.ndarray, n: int, method: str, p=3.0, eps: float = 1e-6) -> DenseTensor:
    rows = as_tensor(rows)
    if rows.shape[0] == 0 or n == 0:
        raise ShapeMismatchError("cannot pool empty map")
    if method == 'gem':
        return gem(rows, segments, n, p, eps)
    if method == 'mac':
        return segment_max(rows, segments, n)
    if method == 'spoc':
        return segment_mean(rows, segments, n)
    raise ConfigError(f"unknown pooling method {method!r}; expected one of {POOLING_METHODS}")


def pool(feature_map, method: str = 'gem', p=3.0, eps: float = 1e-6) -> DenseTensor:
    """Pool a single map with N positions x C channels into a vector [C]."""
    rows, segments, n = feature_rows(feature_map)
    out = pool_rows(rows, segments, n, method, p, eps)
    return reshape(out, (out.shape[1],))


class GlobalPool(Module):
    """Pooling layer; GeM carries a learned exponent p, floored at 1 in the forward pass."""

    def __init__(self, method: str, cfg: PoolingConfig):
        super().__init__()
        if method not in POOLING_METHODS:
            raise ConfigError(f"unknown pooling method {method!r}")
        self.method, self.eps = method, cfg.eps
        if method == 'gem':
            self.p = Parameter(np.array([cfg.p], dtype=get_dtype()))

    def forward(self, feature_map, n_items: Optional[int] = None) -> DenseTensor:
        rows, segments, n = feature_rows(feature_map, n_items)
        p = clamp_min(self.p, 1.0) if self.method == 'gem' else None
        return pool_rows(rows, segments, n, self.method, p, self.eps)
