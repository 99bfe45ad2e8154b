"""
Sparse voxel engine: quantization, coordinate maps, sparse and transposed
convolutions checked against a densify-then-dense-compute reference.
"""
import itertools

import numpy as np
import pytest

from config import QuantizationConfig
from errors import CoordinateError, ShapeMismatchError, UnsupportedStrideError
from models.sparse import (SparseVoxelTensor, coordinate_aligned_add, densify, kernel_offsets, quantize,
                           quantize_batch, sparse_conv, sparse_transposed_conv, sparsify)
from models.tensor import Parameter, backward, relu, tensor_sum

EXTENT = 6
PAD = 2


def random_tensor(rng, n=20, channels=3, stride=1, extent=EXTENT):
    flat = rng.choice(extent ** 3, size=n, replace=False)
    coords = np.stack(np.unravel_index(flat, (extent,) * 3), axis=1) * stride
    return SparseVoxelTensor(coords, rng.normal(size=(n, channels)), stride)


def shuffled(x, rng):
    order = rng.permutation(len(x))
    return SparseVoxelTensor(x.coords[order], x.features.values[order], x.tensor_stride, x.batch_index[order])


def dense_reference(x, weight, kernel_size, out_coords, sign=+1, step=1):
    """Densify x, correlate on the whole grid, read the result at out_coords.

    out(u) = sum over offsets d of x(u + sign * d * step) @ W[d].
    """
    origin = np.full(3, -PAD)
    size = EXTENT + 2 * PAD
    grid = densify(x, origin, (size,) * 3).values
    dense = np.zeros((weight.shape[2],) + (size,) * 3)
    for d, delta in enumerate(kernel_offsets(kernel_size)):
        shift = tuple(int(-sign * v * step) for v in delta)
        dense += np.einsum('cxyz,co->oxyz', np.roll(grid, shift, axis=(1, 2, 3)), weight[d])
    local = out_coords - origin
    return dense[:, local[:, 0], local[:, 1], local[:, 2]].T


def rows_by_coordinate(x):
    return {tuple(c): row for c, row in zip(x.coords.tolist(), x.features.values)}


class TestQuantize:
    """Point clouds become unique voxels with unit features."""

    def test_floor_and_collapse(self):
        """Points in the same cell collapse; negative coordinates floor downwards."""
        points = np.array([[0.001, 0.002, 0.0], [0.004, 0.009, 0.001], [-0.001, 0.0, 0.0]])
        x = quantize(points, QuantizationConfig(step=0.01))
        assert len(x) == 2
        assert {tuple(c) for c in x.coords} == {(0, 0, 0), (-1, 0, 0)}
        np.testing.assert_array_equal(x.features.values, np.ones((2, 1)))

    def test_batch_index_follows_list_position(self):
        """Each cloud keeps its own batch index; identical clouds do not merge."""
        cloud = np.array([[0.1, 0.1, 0.1], [0.5, 0.5, 0.5]])
        x = quantize_batch([cloud, cloud])
        assert sorted(x.batch_index.tolist()) == [0, 0, 1, 1]

    def test_empty_cloud(self):
        """An empty cloud has nothing to voxelize."""
        with pytest.raises(CoordinateError):
            quantize(np.zeros((0, 3)))


class TestSparseTensor:
    """Construction invariants."""

    def test_duplicate_coordinates(self):
        """Two rows at one voxel are rejected."""
        with pytest.raises(CoordinateError):
            SparseVoxelTensor([[0, 0, 0], [0, 0, 0]], np.ones((2, 1)))

    def test_off_lattice_coordinates(self):
        """Coordinates must be multiples of the tensor stride."""
        with pytest.raises(CoordinateError):
            SparseVoxelTensor([[1, 0, 0]], np.ones((1, 1)), tensor_stride=2)

    def test_feature_rows_must_match(self):
        """One feature row per coordinate."""
        with pytest.raises(ShapeMismatchError):
            SparseVoxelTensor([[0, 0, 0]], np.ones((2, 1)))

    def test_densify_single_voxel(self):
        """One voxel at the origin becomes the only nonzero entry of the grid."""
        dense = densify(SparseVoxelTensor([[0, 0, 0]], np.array([[7.0]])), (0, 0, 0), (3, 3, 3))
        expected = np.zeros((1, 3, 3, 3))
        expected[0, 0, 0, 0] = 7.0
        np.testing.assert_array_equal(dense.values, expected)

    @pytest.mark.parametrize('origin', [(0, 0, 0), (1, 0, 0), (0, 0, -7)])
    def test_densify_outside_extent(self, origin):
        """Voxels outside the requested box are an error, not silently dropped."""
        x = SparseVoxelTensor([[0, 0, 0], [5, 0, 0]], np.ones((2, 1)))
        with pytest.raises(CoordinateError):
            densify(x, origin, (5, 5, 5))

    def test_densify_sparsify(self, rng):
        """Densifying and sparsifying a tensor with nonzero rows gives it back."""
        x = random_tensor(rng, n=10, channels=2)
        dense = densify(x, (0, 0, 0), (EXTENT,) * 3)
        assert dense.shape == (2, EXTENT, EXTENT, EXTENT)
        back = sparsify(dense)
        np.testing.assert_array_equal(back.coords, x.coords)
        np.testing.assert_allclose(back.features.values, x.features.values)


class TestSparseConv:
    """Sparse convolutions agree with the dense reference."""

    @pytest.mark.parametrize('kernel_size', [1, 2, 3])
    def test_stride_one(self, rng, kernel_size):
        """Stride 1 keeps the coordinates; 100 random instances match to 1e-12."""
        for _ in range(100):
            x = random_tensor(rng, n=int(rng.integers(1, 30)))
            weight = rng.normal(size=(kernel_size ** 3, 3, 2))
            out = sparse_conv(x, weight, kernel_size)
            np.testing.assert_array_equal(out.coords, x.coords)
            expected = dense_reference(x, weight, kernel_size, out.coords)
            np.testing.assert_allclose(out.features.values, expected, rtol=0, atol=1e-12)

    @pytest.mark.parametrize('kernel_size', [2, 3])
    def test_stride_two(self, rng, kernel_size):
        """Stride 2 projects onto the coarser lattice and doubles the tensor stride."""
        for _ in range(100):
            x = random_tensor(rng, n=int(rng.integers(1, 30)))
            weight = rng.normal(size=(kernel_size ** 3, 3, 2))
            out = sparse_conv(x, weight, kernel_size, stride=2)
            assert out.tensor_stride == 2
            expected_coords = {tuple(c) for c in 2 * np.floor_divide(x.coords, 2)}
            assert {tuple(c) for c in out.coords} == expected_coords
            expected = dense_reference(x, weight, kernel_size, out.coords)
            np.testing.assert_allclose(out.features.values, expected, rtol=0, atol=1e-12)

    @pytest.mark.parametrize('kernel_size', [2, 3])
    def test_transposed(self, rng, kernel_size):
        """Transposed conv is evaluated exactly on the target coordinates."""
        for _ in range(100):
            fine = random_tensor(rng, n=int(rng.integers(1, 30)))
            coarse = sparse_conv(fine, rng.normal(size=(8, 3, 3)), 2, stride=2)
            weight = rng.normal(size=(kernel_size ** 3, 3, 2))
            out = sparse_transposed_conv(coarse, weight, kernel_size, 2, target=fine)
            assert out.tensor_stride == 1
            np.testing.assert_array_equal(out.coords, fine.coords)
            expected = dense_reference(coarse, weight, kernel_size, out.coords, sign=-1)
            np.testing.assert_allclose(out.features.values, expected, rtol=0, atol=1e-12)

    def test_storage_order_does_not_matter(self, rng):
        """Shuffling the input rows leaves coordinates and features unchanged."""
        for _ in range(20):
            x = random_tensor(rng, n=int(rng.integers(2, 30)))
            for kernel_size, stride in ((3, 1), (2, 2)):
                weight = rng.normal(size=(kernel_size ** 3, 3, 2))
                expected = sparse_conv(x, weight, kernel_size, stride)
                got = sparse_conv(shuffled(x, rng), weight, kernel_size, stride)
                np.testing.assert_array_equal(got.coords, expected.coords)
                np.testing.assert_array_equal(got.features.values, expected.features.values)

    def test_receptive_field(self, rng):
        """A difference 50 voxels away does not reach features near the origin."""
        near = np.stack(np.unravel_index(rng.choice(EXTENT ** 3, size=30, replace=False), (EXTENT,) * 3), axis=1)

        def cloud():
            far = np.stack(np.unravel_index(rng.choice(EXTENT ** 3, size=20, replace=False), (EXTENT,) * 3), axis=1)
            coords = np.concatenate([near, far + 50])
            return SparseVoxelTensor(coords, np.ones((len(coords), 1)))

        w0, w1, w2 = rng.normal(size=(125, 1, 4)), rng.normal(size=(8, 4, 4)), rng.normal(size=(27, 4, 4))

        def stack(x):
            h = sparse_conv(x, w0, 5)
            h = sparse_conv(h.replace_features(relu(h.features)), w1, 2, stride=2)
            return sparse_conv(h.replace_features(relu(h.features)), w2, 3)

        a, b = cloud(), cloud()
        assert not np.array_equal(a.coords, b.coords)
        out_a, out_b = rows_by_coordinate(stack(a)), rows_by_coordinate(stack(b))
        near_a = {c: row for c, row in out_a.items() if max(c) < 20}
        near_b = {c: row for c, row in out_b.items() if max(c) < 20}
        assert near_a.keys() == near_b.keys() and near_a
        for c in near_a:
            np.testing.assert_allclose(near_a[c], near_b[c], rtol=0, atol=1e-12)

    def test_transposed_broadcast(self):
        """One coarse voxel with identity kernels reaches each of its 8 children."""
        x = SparseVoxelTensor([[0, 0, 0]], np.array([[1.0, 2.0, 3.0]]), tensor_stride=2)
        children = np.array(list(itertools.product((0, 1), repeat=3)))
        target = SparseVoxelTensor(children, np.ones((8, 1)))
        out = sparse_transposed_conv(x, np.stack([np.eye(3)] * 8), 2, 2, target)
        assert len(out) == 8
        np.testing.assert_array_equal(out.features.values, np.tile([1.0, 2.0, 3.0], (8, 1)))

    def test_transposed_off_lattice_target(self):
        """Targets must sit on the output lattice."""
        x = SparseVoxelTensor([[0, 0, 0]], np.ones((1, 3)), tensor_stride=4)
        target = SparseVoxelTensor([[1, 0, 0]], np.ones((1, 1)))
        with pytest.raises(CoordinateError):
            sparse_transposed_conv(x, np.ones((8, 3, 3)), 2, 2, target)

    def test_batch_items_do_not_interact(self, rng):
        """The same cloud in two batch slots gets the same features."""
        cloud = rng.uniform(-0.05, 0.05, size=(40, 3))
        x = quantize_batch([cloud, cloud])
        out = sparse_conv(x, rng.normal(size=(27, 1, 4)), 3)
        first, second = out.batch_index == 0, out.batch_index == 1
        np.testing.assert_allclose(out.features.values[first], out.features.values[second])

    def test_unsupported_stride(self, rng):
        """Only strides 1 and 2 exist."""
        with pytest.raises(UnsupportedStrideError):
            sparse_conv(random_tensor(rng), rng.normal(size=(8, 3, 2)), 2, stride=3)

    def test_weight_shape(self, rng):
        """Weight axis 1 must match the input channels."""
        with pytest.raises(ShapeMismatchError):
            sparse_conv(random_tensor(rng), rng.normal(size=(27, 5, 2)), 3)

    def test_gradients_reach_features_and_weight(self, rng):
        """Both the features and the kernel receive gradient."""
        x = random_tensor(rng)
        feats = Parameter(x.features.values)
        weight = Parameter(rng.normal(size=(27, 3, 2)))
        out = sparse_conv(x.replace_features(feats), weight, 3)
        backward(tensor_sum(out.features))
        assert feats.grad.shape == feats.shape
        assert np.any(weight.grad != 0)


class TestCoordinateAlignedAdd:
    """Sum over the union of coordinates."""

    def test_union(self):
        """Shared voxels add, others pass through."""
        a = SparseVoxelTensor([[0, 0, 0], [1, 0, 0]], np.array([[1.0], [2.0]]))
        b = SparseVoxelTensor([[1, 0, 0], [2, 0, 0]], np.array([[10.0], [20.0]]))
        out = coordinate_aligned_add(a, b)
        got = {tuple(c): f for c, f in zip(out.coords.tolist(), out.features.values[:, 0])}
        assert got == {(0, 0, 0): 1.0, (1, 0, 0): 12.0, (2, 0, 0): 20.0}

    def test_random_overlap(self, rng):
        """Densified sum equals the sum of the densified operands; coordinates are the union."""
        box = ((0, 0, 0), (EXTENT,) * 3)
        for _ in range(100):
            a = random_tensor(rng, n=int(rng.integers(1, 30)), channels=2)
            b = random_tensor(rng, n=int(rng.integers(1, 30)), channels=2)
            out = coordinate_aligned_add(a, b)
            assert set(map(tuple, out.coords.tolist())) == (set(map(tuple, a.coords.tolist()))
                                                            | set(map(tuple, b.coords.tolist())))
            expected = densify(a, *box).values + densify(b, *box).values
            np.testing.assert_allclose(densify(out, *box).values, expected, rtol=0, atol=1e-12)

    def test_stride_mismatch(self):
        """Tensors on different lattices cannot be added."""
        a = SparseVoxelTensor([[0, 0, 0]], np.ones((1, 1)), 1)
        b = SparseVoxelTensor([[0, 0, 0]], np.ones((1, 1)), 2)
        with pytest.raises(CoordinateError):
            coordinate_aligned_add(a, b)
