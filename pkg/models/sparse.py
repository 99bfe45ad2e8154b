"""
Sparse voxel tensors and the 3D convolutions of the point-cloud branch.

Coordinates are integer voxel indices with a per-row batch index. Rows are kept
in canonical (batch, x, y, z) order; lookups go through a sorted array of
packed int64 keys, and every convolution is a gather / matmul / scatter over
the kernel map (one pair of row lists per kernel offset).
"""
import itertools
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import QuantizationConfig
from errors import CoordinateError, ShapeMismatchError, UnsupportedStrideError
from models.tensor import (DenseTensor, Function, add, as_tensor, get_dtype, reshape,
                           scatter_rows, take_rows, transpose)

logger = logging.getLogger(__name__)

_AXIS_BITS = 17
_AXIS_OFFSET = 1 << (_AXIS_BITS - 1)
_BATCH_BITS = 10
MAX_BATCH = 1 << _BATCH_BITS
MAX_KERNEL = 5


def pack_keys(coords: np.ndarray, batch: np.ndarray) -> np.ndarray:
    """Pack (batch, x, y, z) into sortable int64 keys."""
    shifted = coords.astype(np.int64) + _AXIS_OFFSET
    return ((batch.astype(np.int64) << (3 * _AXIS_BITS))
            | (shifted[:, 0] << (2 * _AXIS_BITS))
            | (shifted[:, 1] << _AXIS_BITS)
            | shifted[:, 2])


def _in_range(coords: np.ndarray) -> np.ndarray:
    return np.all((coords >= -_AXIS_OFFSET) & (coords < _AXIS_OFFSET), axis=1)


class CoordinateMap:
    """Sorted key index over the rows of one sparse tensor, plus a kernel-map cache."""

    def __init__(self, coords: np.ndarray, batch: np.ndarray):
        self.coords = coords
        self.batch = batch
        self.keys = pack_keys(coords, batch)
        self._kernel_maps: Dict[tuple, List[Tuple[np.ndarray, np.ndarray]]] = {}

    def __len__(self) -> int:
        return len(self.keys)

    def lookup(self, coords: np.ndarray, batch: np.ndarray) -> np.ndarray:
        """Row index of each (batch, coord), -1 where the voxel is absent."""
        result = np.full(len(coords), -1, dtype=np.int64)
        valid = _in_range(coords)
        if not np.any(valid) or len(self.keys) == 0:
            return result
        query = pack_keys(coords[valid], batch[valid])
        pos = np.searchsorted(self.keys, query)
        pos_clipped = np.minimum(pos, len(self.keys) - 1)
        hit = self.keys[pos_clipped] == query
        found = np.where(hit, pos_clipped, -1)
        result[valid] = found
        return result

    def kernel_map(self, key: tuple, build) -> List[Tuple[np.ndarray, np.ndarray]]:
        if key not in self._kernel_maps:
            self._kernel_maps[key] = build()
        return self._kernel_maps[key]


class SparseVoxelTensor:
    """Occupied voxel coordinates with one feature row each.

    coords: int64 [N, 3], multiples of tensor_stride.
    features: DenseTensor [N, C].
    batch_index: int64 [N]; coordinates are unique within a batch item.
    """

    def __init__(self, coords, features, tensor_stride: int = 1, batch_index=None,
                 coordinate_map: Optional[CoordinateMap] = None):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        features = as_tensor(features)
        batch_index = (np.zeros(len(coords), dtype=np.int64) if batch_index is None
                       else np.asarray(batch_index, dtype=np.int64))
        if features.ndim != 2 or features.shape[0] != len(coords):
            raise ShapeMismatchError(
                f"sparse tensor: features axis 0 has {features.shape[0] if features.ndim else 0} rows "
                f"for {len(coords)} coordinates")
        if len(batch_index) != len(coords):
            raise ShapeMismatchError("sparse tensor: batch_index length differs from coordinate count")
        if tensor_stride < 1:
            raise CoordinateError(f"tensor_stride must be positive, got {tensor_stride}")
        if np.any(coords % tensor_stride):
            raise CoordinateError(f"coordinates are not multiples of tensor_stride {tensor_stride}")
        if not np.all(_in_range(coords)):
            raise CoordinateError("voxel coordinate outside the addressable range")
        if len(batch_index) and (batch_index.min() < 0 or batch_index.max() >= MAX_BATCH):
            raise CoordinateError(f"batch index must be in [0, {MAX_BATCH})")

        if coordinate_map is None:
            keys = pack_keys(coords, batch_index)
            order = np.argsort(keys, kind='stable')
            if np.any(np.diff(keys[order]) == 0):
                raise CoordinateError("duplicate voxel coordinates")
            if np.any(order != np.arange(len(order))):
                coords, batch_index = coords[order], batch_index[order]
                features = take_rows(features, order)
            coordinate_map = CoordinateMap(coords, batch_index)
        self.coords = coordinate_map.coords
        self.batch_index = coordinate_map.batch
        self.features = features
        self.tensor_stride = int(tensor_stride)
        self.coordinate_map = coordinate_map

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    @property
    def n_items(self) -> int:
        return int(self.batch_index.max()) + 1 if len(self.batch_index) else 0

    def __len__(self) -> int:
        return len(self.coords)

    def replace_features(self, features: DenseTensor) -> 'SparseVoxelTensor':
        """Same coordinates and map, new feature rows."""
        return SparseVoxelTensor(self.coords, features, self.tensor_stride, self.batch_index,
                                 coordinate_map=self.coordinate_map)

    def __repr__(self) -> str:
        return (f"<SparseVoxelTensor voxels={len(self)} channels={self.channels} "
                f"stride={self.tensor_stride} items={self.n_items}>")


# ---------------------------------------------------------------------------
# Quantization
# ---------------------------------------------------------------------------

def voxel_coordinates(points: np.ndarray, step: float) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise CoordinateError("empty point cloud")
    coords = np.floor(points / step).astype(np.int64)
    if not np.all(_in_range(coords)):
        raise CoordinateError(f"points exceed the addressable voxel range at step {step}")
    return coords


def quantize(points: np.ndarray, cfg: Optional[QuantizationConfig] = None) -> SparseVoxelTensor:
    """Voxelize one cloud: floor(p / step), duplicates collapse, feature 1.0."""
    return quantize_batch([points], cfg)


def quantize_batch(clouds: Sequence[np.ndarray], cfg: Optional[QuantizationConfig] = None) -> SparseVoxelTensor:
    """Voxelize several clouds into one batched tensor (batch index = list position)."""
    cfg = cfg or QuantizationConfig()
    if not clouds:
        raise CoordinateError("empty point cloud batch")
    keys = []
    for item, points in enumerate(clouds):
        coords = voxel_coordinates(points, cfg.step)
        keys.append(pack_keys(coords, np.full(len(coords), item, dtype=np.int64)))
    unique = np.unique(np.concatenate(keys))
    batch = unique >> (3 * _AXIS_BITS)
    mask = (1 << _AXIS_BITS) - 1
    coords = np.stack([
        ((unique >> (2 * _AXIS_BITS)) & mask) - _AXIS_OFFSET,
        ((unique >> _AXIS_BITS) & mask) - _AXIS_OFFSET,
        (unique & mask) - _AXIS_OFFSET,
    ], axis=1)
    features = DenseTensor(np.ones((len(coords), 1), dtype=get_dtype()))
    return SparseVoxelTensor(coords, features, 1, batch, coordinate_map=CoordinateMap(coords, batch))


# ---------------------------------------------------------------------------
# Convolutions
# ---------------------------------------------------------------------------

def kernel_offsets(kernel_size: int) -> np.ndarray:
    """Offsets per axis start at -floor((K-1)/2): K=2 -> {0,1}, K=3 -> {-1,0,1}."""
    if not 1 <= kernel_size <= MAX_KERNEL:
        raise ShapeMismatchError(f"kernel size must be in [1, {MAX_KERNEL}], got {kernel_size}")
    start = -((kernel_size - 1) // 2)
    axis = range(start, start + kernel_size)
    return np.array(list(itertools.product(axis, axis, axis)), dtype=np.int64)


class KernelMapMatmul(Function):
    """out[o] = sum over offsets d of f[i] @ W[d] for every (i, o) pair of offset d."""

    def forward(self, features, weight, pairs=(), n_out=0):
        self.features, self.weight, self.pairs = features, weight, pairs
        out = np.zeros((n_out, weight.shape[2]), dtype=features.dtype)
        for d, (rows_in, rows_out) in enumerate(pairs):
            if len(rows_in):
                out[rows_out] += features[rows_in] @ weight[d]
        return out

    def backward(self, grad):
        g_features = np.zeros_like(self.features)
        g_weight = np.zeros_like(self.weight)
        for d, (rows_in, rows_out) in enumerate(self.pairs):
            if len(rows_in):
                g_out = grad[rows_out]
                g_features[rows_in] += g_out @ self.weight[d].T
                g_weight[d] = self.features[rows_in].T @ g_out
        return g_features, g_weight


def _check_weight(x: SparseVoxelTensor, weight: DenseTensor, kernel_size: int) -> None:
    volume = kernel_size ** 3
    if weight.ndim != 3 or weight.shape[0] != volume:
        raise ShapeMismatchError(
            f"sparse conv: weight axis 0 must hold {volume} kernel offsets, got shape {weight.shape}")
    if weight.shape[1] != x.channels:
        raise ShapeMismatchError(
            f"sparse conv: input has {x.channels} channels, weight axis 1 expects {weight.shape[1]}")


def _gather_pairs(source: CoordinateMap, targets: np.ndarray, target_batch: np.ndarray,
                  offsets: np.ndarray, step: int, sign: int) -> List[Tuple[np.ndarray, np.ndarray]]:
    pairs = []
    for delta in offsets:
        rows_in = source.lookup(targets + sign * delta * step, target_batch)
        rows_out = np.nonzero(rows_in >= 0)[0]
        pairs.append((rows_in[rows_out], rows_out))
    return pairs


def _downsample(x: SparseVoxelTensor, offsets: np.ndarray, ts_out: int):
    projected = ts_out * np.floor_divide(x.coords, ts_out)
    _, first = np.unique(pack_keys(projected, x.batch_index), return_index=True)
    out_map = CoordinateMap(projected[first], x.batch_index[first])
    return out_map, _gather_pairs(x.coordinate_map, out_map.coords, out_map.batch, offsets, x.tensor_stride, +1)


def sparse_conv(x: SparseVoxelTensor, weight, kernel_size: int, stride: int = 1,
                bias=None) -> SparseVoxelTensor:
    """Sparse 3D convolution with stride 1 (same coordinates) or 2 (lattice projection)."""
    if stride not in (1, 2):
        raise UnsupportedStrideError(f"sparse conv supports stride 1 or 2, got {stride}")
    if len(x) == 0:
        raise CoordinateError("sparse conv on an empty tensor")
    weight = as_tensor(weight)
    _check_weight(x, weight, kernel_size)
    offsets = kernel_offsets(kernel_size)
    ts_in = x.tensor_stride
    ts_out = ts_in * stride

    if stride == 1:
        out_map = x.coordinate_map
        pairs = out_map.kernel_map(
            ('conv', kernel_size),
            lambda: _gather_pairs(out_map, out_map.coords, out_map.batch, offsets, ts_in, +1))
    else:
        out_map, pairs = x.coordinate_map.kernel_map(
            ('down', kernel_size), lambda: _downsample(x, offsets, ts_out))

    out = KernelMapMatmul.apply(x.features, weight, pairs=pairs, n_out=len(out_map))
    if bias is not None:
        out = add(out, bias)
    return SparseVoxelTensor(out_map.coords, out, ts_out, out_map.batch, coordinate_map=out_map)


def sparse_transposed_conv(x: SparseVoxelTensor, weight, kernel_size: int, stride: int,
                           target: SparseVoxelTensor, bias=None) -> SparseVoxelTensor:
    """Transposed sparse convolution evaluated exactly on `target`'s coordinates.

    out(t) = sum over offsets d of W[d] x(t - d * ts_out), ts_out = ts_in / stride.
    """
    if stride not in (1, 2):
        raise UnsupportedStrideError(f"sparse transposed conv supports stride 1 or 2, got {stride}")
    weight = as_tensor(weight)
    _check_weight(x, weight, kernel_size)
    if x.tensor_stride % stride:
        raise CoordinateError(
            f"tensor_stride {x.tensor_stride} is not divisible by transposed stride {stride}")
    ts_out = x.tensor_stride // stride
    if np.any(target.coords % ts_out):
        raise CoordinateError(f"target coordinates are off the stride-{ts_out} lattice")
    out_map = target.coordinate_map
    pairs = _gather_pairs(x.coordinate_map, out_map.coords, out_map.batch,
                          kernel_offsets(kernel_size), ts_out, -1)
    out = KernelMapMatmul.apply(x.features, weight, pairs=pairs, n_out=len(out_map))
    if bias is not None:
        out = add(out, bias)
    return SparseVoxelTensor(out_map.coords, out, ts_out, out_map.batch, coordinate_map=out_map)


def coordinate_aligned_add(a: SparseVoxelTensor, b: SparseVoxelTensor) -> SparseVoxelTensor:
    """Sum two sparse tensors over the union of their coordinates."""
    if a.tensor_stride != b.tensor_stride:
        raise CoordinateError(f"stride mismatch: {a.tensor_stride} vs {b.tensor_stride}")
    if a.channels != b.channels:
        raise ShapeMismatchError(f"channel axis mismatch: {a.channels} vs {b.channels}")
    if a.coordinate_map is b.coordinate_map or np.array_equal(a.coordinate_map.keys, b.coordinate_map.keys):
        return a.replace_features(add(a.features, b.features))
    keys = np.union1d(a.coordinate_map.keys, b.coordinate_map.keys)
    rows_a = np.searchsorted(keys, a.coordinate_map.keys)
    rows_b = np.searchsorted(keys, b.coordinate_map.keys)
    coords = np.empty((len(keys), 3), dtype=np.int64)
    batch = np.empty(len(keys), dtype=np.int64)
    coords[rows_a], batch[rows_a] = a.coords, a.batch_index
    coords[rows_b], batch[rows_b] = b.coords, b.batch_index
    features = add(scatter_rows(a.features, rows_a, len(keys)), scatter_rows(b.features, rows_b, len(keys)))
    return SparseVoxelTensor(coords, features, a.tensor_stride, batch,
                             coordinate_map=CoordinateMap(coords, batch))


# ---------------------------------------------------------------------------
# Dense bridge
# ---------------------------------------------------------------------------

def densify(x: SparseVoxelTensor, origin: Sequence[int], size: Sequence[int], item: int = 0) -> DenseTensor:
    """Write one batch item into a zero [C, X, Y, Z] grid covering origin .. origin + size - 1."""
    origin = np.asarray(origin, dtype=np.int64)
    size = np.asarray(size, dtype=np.int64)
    rows = np.nonzero(x.batch_index == item)[0]
    local = x.coords[rows] - origin
    if np.any(local < 0) or np.any(local >= size):
        raise CoordinateError("voxel coordinate outside the densify extent")
    flat = np.ravel_multi_index(local.T, tuple(size)) if len(rows) else np.zeros(0, dtype=np.int64)
    grid = scatter_rows(take_rows(x.features, rows), flat, int(np.prod(size)))
    return reshape(transpose(grid), (x.channels,) + tuple(int(s) for s in size))


def sparsify(dense, origin: Sequence[int] = (0, 0, 0), tensor_stride: int = 1) -> SparseVoxelTensor:
    """Inverse of densify: keep positions whose feature column is not all zero."""
    dense = as_tensor(dense)
    channels = dense.shape[0]
    columns = reshape(dense, (channels, -1))
    occupied = np.nonzero(np.any(columns.values != 0, axis=0))[0]
    coords = np.stack(np.unravel_index(occupied, dense.shape[1:]), axis=1) + np.asarray(origin, dtype=np.int64)
    features = take_rows(transpose(columns), occupied)
    return SparseVoxelTensor(coords, features, tensor_stride)
