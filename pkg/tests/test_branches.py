"""
Network branches: dense convolution, channel attention, the point-cloud
pyramid, the image CNN, late fusion and the assembled model.
"""
import numpy as np
import pytest

from config import NetworkConfig, PoolingConfig
from errors import ShapeMismatchError
from models.branches import ChannelAttention, ImageBranch, PointCloudFPN, eca_kernel_size, fuse
from models.functional import conv2d
from models.network import IMAGE_PREFIX, ModelInput, PlaceRecognitionNet
from models.sparse import SparseVoxelTensor, quantize_batch
from models.tensor import DenseTensor


def clouds(rng, n=2, points=120):
    return quantize_batch([rng.uniform(-0.06, 0.06, size=(points, 3)) for _ in range(n)])


def images(rng, n=2, size=32):
    return DenseTensor(rng.uniform(size=(n, 3, size, size)))


def naive_conv2d(x, kernel, stride, padding):
    """Cross-correlation written out loop by loop."""
    b, c_in, h, w = x.shape
    c_out, _, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((b, c_out, ho, wo))
    for n in range(b):
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    for c in range(c_in):
                        for u in range(kh):
                            for v in range(kw):
                                out[n, o, i, j] += kernel[o, c, u, v] * xp[n, c, i * stride + u, j * stride + v]
    return out


def shuffled(x, rng):
    """The same voxels with their rows stored in a random order."""
    order = rng.permutation(len(x))
    return SparseVoxelTensor(x.coords[order], x.features.values[order], x.tensor_stride, x.batch_index[order])


class TestConv2d:
    """Dense cross-correlation against the loop-by-loop definition."""

    def test_random_shapes(self, rng):
        """Random shapes up to 8x8 with stride 1-3 and padding 0-2 match to 1e-12."""
        for _ in range(40):
            h, w = rng.integers(3, 9, size=2)
            kh, kw = rng.integers(1, 4, size=2)
            stride, padding = int(rng.integers(1, 4)), int(rng.integers(0, 3))
            x = rng.normal(size=(int(rng.integers(1, 3)), int(rng.integers(1, 4)), h, w))
            kernel = rng.normal(size=(int(rng.integers(1, 4)), x.shape[1], kh, kw))
            out = conv2d(x, kernel, stride=stride, padding=padding)
            expected = naive_conv2d(x, kernel, stride, padding)
            assert out.shape == expected.shape
            np.testing.assert_allclose(out.values, expected, rtol=0, atol=1e-12)

    def test_identity_kernel(self, rng):
        """A centered one-hot 3x3 kernel with padding 1 returns the input."""
        x = rng.normal(size=(1, 5, 7))
        kernel = np.zeros((1, 1, 3, 3))
        kernel[0, 0, 1, 1] = 1.0
        np.testing.assert_array_equal(conv2d(x, kernel, padding=1).values, x)

    def test_all_ones(self):
        """An all-ones 3x3 kernel over an all-ones 3x3 input sums to 9."""
        out = conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)))
        assert out.shape == (1, 1, 1)
        assert out.values.item() == 9.0

    def test_channel_mismatch(self, rng):
        """Kernel axis 1 must match the input channels."""
        with pytest.raises(ShapeMismatchError):
            conv2d(rng.normal(size=(1, 2, 5, 5)), rng.normal(size=(1, 3, 3, 3)))

    def test_kernel_larger_than_padded_input(self, rng):
        with pytest.raises(ShapeMismatchError):
            conv2d(rng.normal(size=(1, 1, 2, 2)), rng.normal(size=(1, 1, 3, 3)))


class TestChannelAttention:
    """Per-channel gating from a 1D conv over channel averages."""

    @pytest.mark.parametrize('channels, expected', [(4, 1), (32, 3), (64, 3), (256, 5)])
    def test_adaptive_kernel_is_odd(self, channels, expected):
        """Kernel size follows log2(C) and is always odd."""
        assert eca_kernel_size(channels) == expected

    def test_dense_gating(self, rng):
        """Output keeps the shape and shrinks every channel by a factor in (0, 1)."""
        eca = ChannelAttention(6, rng)
        x = DenseTensor(rng.uniform(0.5, 1.0, size=(2, 6, 4, 4)))
        out = eca(x)
        assert out.shape == x.shape
        ratio = out.values / x.values
        assert np.all((ratio > 0) & (ratio < 1))
        # one scale per (item, channel)
        np.testing.assert_allclose(ratio, ratio[:, :, :1, :1] * np.ones_like(ratio))

    def test_sparse_gating_keeps_coordinates(self, rng):
        """Sparse input keeps its coordinates and channel count."""
        x = clouds(rng)
        x = x.replace_features(DenseTensor(rng.uniform(size=(len(x), 4))))
        out = ChannelAttention(4, rng)(x)
        np.testing.assert_array_equal(out.coords, x.coords)
        assert out.channels == 4


class TestPointCloudFPN:
    """Sparse pyramid with a top-down lateral merge."""

    def test_output_lattice_and_width(self, rng, tiny_network):
        """Output has k channels on the stride-2^(L-2) lattice."""
        fpn = PointCloudFPN(tiny_network, rng)
        out = fpn(clouds(rng), 2)
        assert out.channels == tiny_network.k
        assert out.tensor_stride == fpn.output_stride == 2
        assert set(out.batch_index.tolist()) == {0, 1}

    def test_block_strides(self, rng, tiny_network):
        """Each downsampling block doubles the tensor stride."""
        fpn = PointCloudFPN(tiny_network, rng)
        strides = [o.tensor_stride for o in fpn.block_outputs(clouds(rng))]
        assert strides == [1, 2, 4]

    def test_row_order_does_not_matter(self, rng, tiny_network):
        """20 shuffles of the input rows give the same point-cloud descriptor."""
        model = PlaceRecognitionNet(tiny_network.model_copy(update={'modality': 'pc'}), PoolingConfig(), seed=2)
        model.eval()
        x = clouds(rng)
        expected = model(ModelInput(size=2, clouds=x)).pc.values
        for _ in range(20):
            got = model(ModelInput(size=2, clouds=shuffled(x, rng))).pc.values
            np.testing.assert_array_equal(got, expected)

    def test_multichannel_input_rejected(self, rng, tiny_network):
        """The pyramid takes occupancy (1 channel) input."""
        x = clouds(rng)
        x = x.replace_features(DenseTensor(np.ones((len(x), 2))))
        with pytest.raises(ShapeMismatchError):
            PointCloudFPN(tiny_network, rng)(x)


class TestImageBranch:
    """Stride-2 CNN ending in a 1x1 reduction to k channels."""

    def test_feature_map_shape(self, rng, tiny_network):
        """Two stride-2 blocks turn 32x32 into 8x8 with k channels."""
        out = ImageBranch(tiny_network, rng)(images(rng))
        assert out.shape == (2, tiny_network.k, 8, 8)

    def test_small_image_rejected(self, rng, tiny_network):
        """Images below 32x32 are rejected."""
        with pytest.raises(ShapeMismatchError):
            ImageBranch(tiny_network, rng)(images(rng, size=16))


class TestFusion:
    """Late fusion of two descriptors."""

    def test_concat_and_add(self):
        """concat doubles the width, add keeps it."""
        a, b = DenseTensor(np.ones((2, 3))), DenseTensor(2 * np.ones((2, 3)))
        assert fuse(a, b, 'concat').shape == (2, 6)
        np.testing.assert_array_equal(fuse(a, b, 'add').values, 3 * np.ones((2, 3)))

    def test_width_mismatch(self):
        """Descriptors of different width cannot be fused."""
        with pytest.raises(ShapeMismatchError):
            fuse(DenseTensor(np.ones((2, 3))), DenseTensor(np.ones((2, 4))))


class TestNetwork:
    """The assembled descriptor extractor."""

    def test_fused_descriptors(self, rng, tiny_network):
        """Fused model emits three unit-norm heads of the configured widths."""
        model = PlaceRecognitionNet(tiny_network, PoolingConfig(), seed=1)
        out = model(ModelInput(size=2, clouds=clouds(rng), images=images(rng)))
        k = tiny_network.k
        assert out.fused.shape == (2, 2 * k)
        assert out.pc.shape == out.rgb.shape == (2, k)
        np.testing.assert_allclose(np.linalg.norm(out.pc.values, axis=1), 1.0)
        np.testing.assert_allclose(np.linalg.norm(out.rgb.values, axis=1), 1.0)

    @pytest.mark.parametrize('head', ['fc', 'mlp'])
    def test_fusion_heads(self, rng, tiny_network, head):
        """fc and mlp heads keep the fused width."""
        cfg = tiny_network.model_copy(update={'fusion_head': head, 'fusion_mode': 'add'})
        model = PlaceRecognitionNet(cfg, PoolingConfig())
        out = model(ModelInput(size=2, clouds=clouds(rng), images=images(rng)))
        assert out.fused.shape == (2, tiny_network.k)

    def test_unimodal_point_cloud(self, rng, tiny_network):
        """A pc-only model has no image branch and its fused head is D_PC."""
        model = PlaceRecognitionNet(tiny_network.model_copy(update={'modality': 'pc'}), PoolingConfig())
        out = model(ModelInput(size=2, clouds=clouds(rng)))
        assert out.rgb is None
        assert out.fused is out.pc
        assert not any(name.startswith(IMAGE_PREFIX) for name, _ in model.named_parameters())

    def test_missing_modality(self, rng, tiny_network):
        """A fused model needs both inputs."""
        model = PlaceRecognitionNet(tiny_network, PoolingConfig())
        with pytest.raises(ShapeMismatchError):
            model(ModelInput(size=2, clouds=clouds(rng)))

    def test_seeded_initialization(self, tiny_network):
        """The same seed builds identical weights."""
        a = PlaceRecognitionNet(tiny_network, PoolingConfig(), seed=5).state_dict()
        b = PlaceRecognitionNet(tiny_network, PoolingConfig(), seed=5).state_dict()
        assert a.keys() == b.keys()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_parameter_groups(self, tiny_network):
        """Image-branch parameters form their own group."""
        model = PlaceRecognitionNet(tiny_network, PoolingConfig())
        groups = model.parameter_groups()
        image_names = {name for name, _ in model.named_parameters() if name.startswith(IMAGE_PREFIX)}
        assert len(groups['image']) == len(image_names) > 0
        assert len(groups['main']) + len(groups['image']) == len(model.parameters())

    def test_invalid_config_rejected(self):
        """Channel lists need a stem and two downsampling blocks."""
        with pytest.raises(ValueError):
            NetworkConfig(pc_channels=(4, 4))
