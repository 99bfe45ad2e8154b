"""
Reverse-mode engine: tape recording, gradient accumulation, precision switch
and the finite-difference oracle, from elementwise ops up to the whole network.
"""
import numpy as np
import pytest

from errors import ConfigError, DomainError, NumericError, ShapeMismatchError
from models.functional import elementwise_suite
from models.tensor import (DenseTensor, Parameter, backward, concat_channels, get_dtype, l2_normalize, mean,
                           no_grad, power, precision, relu, segment_max, segment_mean, sigmoid, sqrt,
                           tensor_sum)
from services.gradcheck import BRANCH_TOLERANCE, OPS, finite_difference_check, run_gradcheck


class TestBackward:
    """Gradients flow from a scalar loss to the leaves."""

    def test_square_sum(self):
        """d/dx sum(x^2) is 2x."""
        x = Parameter(np.array([1.0, -2.0, 3.0]))
        backward(tensor_sum(x * x))
        np.testing.assert_allclose(x.grad, [2.0, -4.0, 6.0])

    def test_shared_subexpression(self):
        """A node used twice receives both contributions."""
        x = Parameter(np.array([2.0]))
        y = x * 3.0
        backward(tensor_sum(y * y + y))
        np.testing.assert_allclose(x.grad, [2 * 9 * 2.0 + 3.0])

    def test_broadcast_gradient_is_reduced(self):
        """A broadcast bias gets the sum over the broadcast axis."""
        x = DenseTensor(np.ones((4, 3)))
        b = Parameter(np.zeros(3))
        backward(tensor_sum(x + b))
        np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])

    def test_leaf_gradients_accumulate(self):
        """Two backward passes add into .grad."""
        x = Parameter(np.array([1.0, 2.0]))
        backward(tensor_sum(x * 2.0))
        backward(tensor_sum(x * 2.0))
        np.testing.assert_allclose(x.grad, [4.0, 4.0])

    def test_unreached_parameter_gets_zero(self):
        """Parameters outside the graph get a zero gradient, not None."""
        x = Parameter(np.array([1.0]))
        unused = Parameter(np.array([5.0, 6.0]))
        backward(tensor_sum(x), [x, unused])
        np.testing.assert_array_equal(unused.grad, [0.0, 0.0])

    def test_non_scalar_loss_rejected(self):
        """backward() needs a single-element loss."""
        x = Parameter(np.ones(3))
        with pytest.raises(ShapeMismatchError):
            backward(x * 2.0)


class TestNoGrad:
    """Tape recording can be switched off."""

    def test_no_tape_under_no_grad(self):
        """Outputs computed under no_grad do not require gradients."""
        x = Parameter(np.ones(2))
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad
        assert y.tape_id is None

    def test_recording_restored(self):
        """Leaving the block restores recording."""
        x = Parameter(np.ones(2))
        with no_grad():
            pass
        assert (x * 2.0).requires_grad


class TestPrecision:
    """Run-wide float precision."""

    def test_context_switches_and_restores(self):
        """precision('f32') applies inside the block only."""
        assert get_dtype() == np.float64
        with precision('f32'):
            assert DenseTensor([1.0]).values.dtype == np.float32
        assert get_dtype() == np.float64

    def test_unknown_precision(self):
        """Only f32 and f64 exist."""
        with pytest.raises(ConfigError):
            with precision('f16'):
                pass


class TestDomain:
    """Undefined values are rejected instead of producing NaN."""

    def test_negative_base_fractional_power(self):
        """pow of a negative base with exponent 0.5 raises DomainError."""
        with pytest.raises(DomainError):
            power(DenseTensor([-1.0, 2.0]), 0.5)

    def test_negative_sqrt(self):
        """sqrt of a negative value raises DomainError."""
        with pytest.raises(DomainError):
            sqrt(DenseTensor([-0.1]))

    def test_integer_power_of_negative_is_fine(self):
        """An integral exponent accepts negative bases."""
        assert power(DenseTensor([-2.0]), 2.0).item() == pytest.approx(4.0)


class TestSegments:
    """Per-segment reductions used by pooling and channel attention."""

    def test_segment_mean(self):
        """Rows are averaged by segment id."""
        x = DenseTensor(np.array([[1.0], [3.0], [10.0]]))
        out = segment_mean(x, np.array([0, 0, 1]), 2)
        np.testing.assert_allclose(out.values, [[2.0], [10.0]])

    def test_empty_segment_rejected(self):
        """A segment without rows has no mean."""
        with pytest.raises(ShapeMismatchError):
            segment_mean(DenseTensor(np.ones((2, 1))), np.array([0, 0]), 2)

    def test_segment_max_gradient_goes_to_argmax(self):
        """Only the maximal row of each segment gets gradient."""
        x = Parameter(np.array([[1.0], [5.0], [2.0]]))
        backward(tensor_sum(segment_max(x, np.array([0, 0, 1]), 2)))
        np.testing.assert_array_equal(x.grad, [[0.0], [1.0], [1.0]])


class TestElementwiseSuite:
    """Ops dispatched by name."""

    def test_relu(self):
        np.testing.assert_array_equal(elementwise_suite(DenseTensor([-2.0, 3.0]), 'relu').values, [0.0, 3.0])

    def test_l2_normalize(self):
        """A 3-4-5 triangle normalizes to 0.6, 0.8."""
        out = elementwise_suite(DenseTensor([3.0, 4.0]), 'l2_normalize')
        np.testing.assert_allclose(out.values, [0.6, 0.8])

    def test_batchnorm_train(self):
        """Two rows 1 and 3 normalize to about -1 and +1 and move the running statistics."""
        running_mean, running_var = np.zeros(1), np.ones(1)
        out = elementwise_suite(DenseTensor([[1.0], [3.0]]), 'batchnorm', np.ones(1), np.zeros(1),
                                running_mean, running_var, training=True)
        np.testing.assert_allclose(out.values, [[-1.0], [1.0]], atol=1e-4)
        np.testing.assert_allclose(running_mean, [0.2])
        np.testing.assert_allclose(running_var, [1.1])

    def test_concat_channels(self):
        out = elementwise_suite(DenseTensor(np.ones((2, 1))), 'concat_channels', DenseTensor(np.zeros((2, 2))))
        assert out.shape == (2, 3)

    def test_pow_gradient(self):
        x = Parameter(np.array([2.0]))
        backward(tensor_sum(elementwise_suite(x, 'pow', 3.0)))
        np.testing.assert_allclose(x.grad, [12.0])

    def test_unknown_op(self):
        with pytest.raises(ConfigError):
            elementwise_suite(DenseTensor([1.0]), 'softmax')


class TestFiniteDifference:
    """Analytic gradients agree with central differences."""

    @pytest.mark.parametrize('fn', [
        lambda t: tensor_sum(sigmoid(t) * t),
        lambda t: tensor_sum(power(t, 2.5)),
        lambda t: tensor_sum(relu(t - 1.0) * t),
        lambda t: tensor_sum(l2_normalize(t, axis=-1) * DenseTensor(np.arange(4.0))),
        lambda t: mean(concat_channels([t, t * t])),
    ])
    def test_elementwise(self, fn, rng):
        """Relative error stays below 1e-6 on smooth inputs."""
        x = DenseTensor(rng.uniform(0.5, 1.5, size=(3, 4)))
        assert finite_difference_check(fn, x) < 1e-6

    def test_input_restored(self, rng):
        """The check leaves x unchanged."""
        values = rng.uniform(0.5, 1.5, size=(2, 3))
        x = DenseTensor(values.copy())
        finite_difference_check(lambda t: tensor_sum(t * t), x)
        np.testing.assert_array_equal(x.values, values)

    def test_non_scalar_function(self, rng):
        """The oracle needs a scalar function."""
        with pytest.raises(ShapeMismatchError):
            finite_difference_check(lambda t: t * 2.0, DenseTensor(rng.uniform(size=3)))

    def test_nan_function(self):
        """A NaN function value is a numeric failure."""
        with pytest.raises(NumericError):
            finite_difference_check(lambda t: tensor_sum(t * np.nan), DenseTensor([1.0]))

    def test_small_inputs_checked_at_every_coordinate(self, rng):
        """Below max_coords every entry is perturbed; above it exactly max_coords are."""
        calls = []

        def counted(t):
            calls.append(1)
            return tensor_sum(t * t)

        finite_difference_check(counted, DenseTensor(rng.uniform(size=(4, 5))), max_coords=64)
        assert len(calls) == 1 + 2 * 20
        calls.clear()
        finite_difference_check(counted, DenseTensor(rng.uniform(size=(10, 10))), max_coords=30, rng=rng)
        assert len(calls) == 1 + 2 * 30


class TestGradcheckSuite:
    """The op suite behind the gradcheck command."""

    def test_whole_branch_and_network(self):
        """Point-cloud branch and the fused network agree with central differences below 1e-4."""
        results = run_gradcheck(['pc_branch', 'network'])
        assert {r.op for r in results} == {'pc_branch', 'network'}
        assert all(r.passed for r in results), results
        assert max(r.max_error for r in results) < BRANCH_TOLERANCE

    def test_every_op_registered(self):
        """Single ops, losses and the composed model all have entries."""
        assert {'conv2d', 'sparse_conv', 'sparse_transposed_conv', 'eca', 'gem', 'batchnorm', 'elementwise',
                'triplet_loss', 'multi_head_loss', 'pc_branch', 'network'} == set(OPS)

    def test_unknown_op(self):
        with pytest.raises(ConfigError):
            run_gradcheck(['softmax'])
