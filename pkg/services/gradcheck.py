"""
Finite-difference gradient oracle and the op suite behind the `gradcheck` command.
"""
import logging
import time
import zlib
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from config import LossConfig, NetworkConfig, PoolingConfig
from errors import ConfigError, NumericError, ShapeMismatchError
from models.branches import ChannelAttention
from models.functional import batch_norm, conv2d, elementwise_suite
from models.network import ModelInput, PlaceRecognitionNet
from models.pooling import GlobalPool
from models.sparse import SparseVoxelTensor, sparse_conv, sparse_transposed_conv
from models.tensor import DenseTensor, backward, mul, no_grad, precision, tensor_sum
from services.losses import head_loss, multi_head_loss, similarity_masks

logger = logging.getLogger(__name__)

EPS_RANGE = (1e-7, 1e-3)
# inputs with more entries are checked at this many sampled coordinates
DEFAULT_MAX_COORDS = 512
# whole-branch compositions
BRANCH_TOLERANCE = 1e-4
GRADCHECK_NETWORK = NetworkConfig(k=4, pc_channels=(2, 2, 4), image_channels=(2, 4))


def finite_difference_check(f: Callable[[DenseTensor], DenseTensor], x: DenseTensor, eps: float = 1e-5,
                            max_coords: Optional[int] = None,
                            rng: Optional[np.random.Generator] = None) -> float:
    """Max over coordinates of |analytic - central| / max(|analytic|, |central|, 1e-8).

    x is perturbed in place and restored; f must rebuild its graph on every call.
    """
    if not EPS_RANGE[0] <= eps <= EPS_RANGE[1]:
        logger.warning("eps %g is outside [%g, %g]; expect truncation or round-off error", eps, *EPS_RANGE)
    x.requires_grad = True
    x.grad = None
    out = f(x)
    if out.values.size != 1:
        raise ShapeMismatchError(f"gradient check needs a scalar function, got shape {out.shape}")
    if not np.all(np.isfinite(out.values)):
        raise NumericError("function value is not finite")
    backward(out, [x])
    analytic = x.grad.copy()

    coords = np.arange(x.values.size)
    if max_coords is not None and len(coords) > max_coords:
        rng = rng or np.random.default_rng(0)
        coords = np.sort(rng.choice(len(coords), size=max_coords, replace=False))

    worst = 0.0
    with no_grad():
        for flat in coords:
            idx = np.unravel_index(flat, x.values.shape)
            original = x.values[idx]
            x.values[idx] = original + eps
            plus = f(x).item()
            x.values[idx] = original - eps
            minus = f(x).item()
            x.values[idx] = original
            central = (plus - minus) / (2 * eps)
            if np.isnan(central):
                raise NumericError(f"NaN in finite difference at coordinate {tuple(int(i) for i in idx)}")
            a = float(analytic[idx])
            worst = max(worst, abs(a - central) / max(abs(a), abs(central), 1e-8))
    return worst


# ---------------------------------------------------------------------------
# Op suite
# ---------------------------------------------------------------------------

@dataclass
class Check:
    label: str
    f: Callable[[DenseTensor], DenseTensor]
    x: DenseTensor
    tolerance: Optional[float] = None


@dataclass
class GradcheckResult:
    op: str
    label: str
    max_error: float
    passed: bool


def _uniform(rng: np.random.Generator, shape, lo: float = 0.5, hi: float = 1.5) -> DenseTensor:
    return DenseTensor(rng.uniform(lo, hi, size=shape))


def _project(weights: np.ndarray) -> Callable[[DenseTensor], DenseTensor]:
    """Fixed random linear functional turning any output into a scalar."""
    return lambda out: tensor_sum(mul(out, weights))


def _coords(rng: np.random.Generator, n: int, extent: int = 6) -> np.ndarray:
    flat = rng.choice(extent ** 3, size=n, replace=False)
    return np.stack(np.unravel_index(flat, (extent,) * 3), axis=1)


def _conv2d_checks(rng: np.random.Generator) -> List[Check]:
    x = _uniform(rng, (2, 2, 6, 6))
    kernel = _uniform(rng, (3, 2, 3, 3))
    proj = _project(rng.uniform(0.5, 1.5, size=(2, 3, 3, 3)))
    return [
        Check('input', lambda t: proj(conv2d(t, kernel, stride=2, padding=1)), x),
        Check('kernel', lambda t: proj(conv2d(x, t, stride=2, padding=1)), kernel),
    ]


def _sparse_conv_checks(rng: np.random.Generator) -> List[Check]:
    coords = _coords(rng, 14)
    features = _uniform(rng, (14, 3))
    w3 = _uniform(rng, (27, 3, 4))
    w2 = _uniform(rng, (8, 3, 4))
    proj3 = rng.uniform(0.5, 1.5, size=(14, 4))

    def strided(feats, weight):
        out = sparse_conv(SparseVoxelTensor(coords, feats), weight, 2, stride=2)
        return tensor_sum(mul(out.features, np.linspace(0.5, 1.5, out.features.size).reshape(out.features.shape)))

    return [
        Check('features', lambda t: tensor_sum(mul(sparse_conv(SparseVoxelTensor(coords, t), w3, 3).features, proj3)),
              features),
        Check('weight', lambda t: tensor_sum(mul(sparse_conv(SparseVoxelTensor(coords, features), t, 3).features, proj3)),
              w3),
        Check('features/stride2', lambda t: strided(t, w2), features),
        Check('weight/stride2', lambda t: strided(features, t), w2),
    ]


def _sparse_transposed_checks(rng: np.random.Generator) -> List[Check]:
    target_coords = _coords(rng, 16)
    coarse = np.unique(2 * np.floor_divide(target_coords, 2), axis=0)
    target = SparseVoxelTensor(target_coords, np.ones((16, 1)))
    features = _uniform(rng, (len(coarse), 3))
    weight = _uniform(rng, (8, 3, 2))
    proj = rng.uniform(0.5, 1.5, size=(16, 2))

    def run(feats, w):
        out = sparse_transposed_conv(SparseVoxelTensor(coarse, feats, tensor_stride=2), w, 2, 2, target)
        return tensor_sum(mul(out.features, proj))

    return [Check('features', lambda t: run(t, weight), features), Check('weight', lambda t: run(features, t), weight)]


def _eca_checks(rng: np.random.Generator) -> List[Check]:
    eca = ChannelAttention(8, rng, kernel_size=3)
    dense = DenseTensor(rng.normal(0.0, 1.0, size=(2, 8, 3, 3)))
    proj_dense = _project(rng.uniform(0.5, 1.5, size=(2, 8, 3, 3)))
    coords = _coords(rng, 10)
    feats = DenseTensor(rng.normal(0.0, 1.0, size=(10, 8)))
    batch_index = np.array([0] * 5 + [1] * 5)
    proj_sparse = rng.uniform(0.5, 1.5, size=(10, 8))

    def sparse(t):
        return tensor_sum(mul(eca(SparseVoxelTensor(coords, t, batch_index=batch_index)).features, proj_sparse))

    return [
        Check('dense input', lambda t: proj_dense(eca(t)), dense),
        Check('sparse input', sparse, feats),
        Check('weight', lambda _: proj_dense(eca(dense)), eca.weight),
    ]


def _gem_checks(rng: np.random.Generator) -> List[Check]:
    pool = GlobalPool('gem', PoolingConfig(p=3.0))
    coords = _coords(rng, 12)
    feats = _uniform(rng, (12, 5), 0.1, 1.0)
    batch_index = np.array([0] * 6 + [1] * 6)
    proj = _project(rng.uniform(0.5, 1.5, size=(2, 5)))

    def run(t):
        return proj(pool(SparseVoxelTensor(coords, t, batch_index=batch_index), 2))

    return [
        Check('features', run, feats),
        Check('p', lambda _: run(feats), pool.p),
    ]


def _batchnorm_checks(rng: np.random.Generator) -> List[Check]:
    x = DenseTensor(rng.normal(0.0, 1.0, size=(6, 4)))
    gamma = _uniform(rng, 4)
    beta = DenseTensor(rng.normal(0.0, 1.0, size=4))
    running_mean = rng.normal(0.0, 0.2, size=4)
    running_var = rng.uniform(0.5, 1.5, size=4)
    proj = _project(rng.uniform(0.5, 1.5, size=(6, 4)))
    return [
        Check('train/input', lambda t: proj(batch_norm(t, gamma, beta)), x),
        Check('train/gamma', lambda t: proj(batch_norm(x, t, beta)), gamma),
        Check('train/beta', lambda t: proj(batch_norm(x, gamma, t)), beta),
        Check('eval/input', lambda t: proj(batch_norm(t, gamma, beta, running_mean, running_var, training=False)), x),
        Check('eval/gamma', lambda t: proj(batch_norm(x, t, beta, running_mean, running_var, training=False)), gamma),
    ]


def _elementwise_checks(rng: np.random.Generator) -> List[Check]:
    base = _uniform(rng, (3, 4))
    exponent = DenseTensor(np.array(3.0))
    signed = DenseTensor(rng.normal(0.0, 1.0, size=(3, 4)))
    other = DenseTensor(rng.normal(0.0, 1.0, size=(3, 2)))
    proj = _project(rng.uniform(0.5, 1.5, size=(3, 4)))
    proj_cat = _project(rng.uniform(0.5, 1.5, size=(3, 6)))
    return [
        Check('pow/base', lambda t: proj(elementwise_suite(t, 'pow', exponent)), base),
        Check('pow/exponent', lambda t: proj(elementwise_suite(base, 'pow', t)), exponent),
        Check('relu', lambda t: proj(elementwise_suite(t, 'relu')), signed),
        Check('sigmoid', lambda t: proj(elementwise_suite(t, 'sigmoid')), signed),
        Check('add', lambda t: proj(elementwise_suite(t, 'add', base)), signed),
        Check('mul', lambda t: proj(elementwise_suite(t, 'mul', base)), signed),
        Check('l2_normalize', lambda t: proj(elementwise_suite(t, 'l2_normalize', axis=-1)), signed),
        Check('mean', lambda t: tensor_sum(mul(elementwise_suite(t, 'mean', axis=0), np.arange(1.0, 5.0))), signed),
        Check('concat_channels', lambda t: proj_cat(elementwise_suite(t, 'concat_channels', other)), signed),
    ]


def _loss_positions() -> np.ndarray:
    """Four places 100 m apart, two observations each 3 m apart."""
    places = np.arange(4, dtype=np.float64) * 100.0
    return np.stack([np.repeat(places, 2), np.tile([0.0, 3.0], 4)], axis=1)


def _triplet_checks(rng: np.random.Generator) -> List[Check]:
    positive, negative = similarity_masks(_loss_positions())
    descriptors = DenseTensor(rng.normal(0.0, 1.0, size=(8, 4)))
    return [Check('descriptors', lambda t: head_loss(t, positive, negative, 2.0).loss, descriptors)]


def _multi_head_checks(rng: np.random.Generator) -> List[Check]:
    positive, negative = similarity_masks(_loss_positions())
    cfg = LossConfig(margin=2.0, alpha=0.3, beta=0.2)
    heads = {name: DenseTensor(rng.normal(0.0, 1.0, size=(8, 4))) for name in ('fused', 'pc', 'rgb')}

    def objective(name):
        def f(t):
            values = dict(heads, **{name: t})
            losses = {k: head_loss(v, positive, negative, cfg.margin) for k, v in values.items()}
            return multi_head_loss(losses, cfg).objective
        return f

    return [Check(name, objective(name), heads[name]) for name in ('fused', 'pc', 'rgb')]


def _gradcheck_model(rng: np.random.Generator, modality: str) -> PlaceRecognitionNet:
    """A tiny model in eval mode, so batch norm is a fixed affine map."""
    cfg = GRADCHECK_NETWORK.model_copy(update={'modality': modality})
    model = PlaceRecognitionNet(cfg, PoolingConfig(), seed=int(rng.integers(1 << 31)))
    model.eval()
    return model


def _pc_branch_checks(rng: np.random.Generator) -> List[Check]:
    """Ten voxels through the pyramid, GeM and normalization."""
    model = _gradcheck_model(rng, 'pc')
    coords = _coords(rng, 10, extent=4)
    feats = _uniform(rng, (10, 1))
    proj = _project(rng.uniform(0.5, 1.5, size=(1, GRADCHECK_NETWORK.k)))
    lateral = getattr(model.pc, f'lateral{model.pc.depth - 2}')

    def run(t):
        return proj(model(ModelInput(size=1, clouds=SparseVoxelTensor(coords, t))).pc)

    return [
        Check('input', run, feats, BRANCH_TOLERANCE),
        Check('conv0.weight', lambda _: run(feats), model.pc.conv0.conv.weight, BRANCH_TOLERANCE),
        Check('lateral.weight', lambda _: run(feats), lateral.weight, BRANCH_TOLERANCE),
        Check('gem.p', lambda _: run(feats), model.pc_pool.p, BRANCH_TOLERANCE),
    ]


def _network_checks(rng: np.random.Generator) -> List[Check]:
    """Two clouds and two images through both branches into the fused descriptor."""
    model = _gradcheck_model(rng, 'fused')
    coords = _coords(rng, 20, extent=4)
    batch_index = np.repeat([0, 1], 10)
    feats = _uniform(rng, (20, 1))
    images = DenseTensor(rng.uniform(0.0, 1.0, size=(2, 3, 32, 32)))
    proj = _project(rng.uniform(0.5, 1.5, size=(2, GRADCHECK_NETWORK.fused_width)))

    def run(t):
        clouds = SparseVoxelTensor(coords, t, batch_index=batch_index)
        return proj(model(ModelInput(size=2, clouds=clouds, images=images)).fused)

    return [
        Check('cloud input', run, feats, BRANCH_TOLERANCE),
        Check('pc.conv0.weight', lambda _: run(feats), model.pc.conv0.conv.weight, BRANCH_TOLERANCE),
        Check('image.block1.weight', lambda _: run(feats), model.image.block1.conv.weight, BRANCH_TOLERANCE),
    ]


OPS: Dict[str, Callable[[np.random.Generator], List[Check]]] = {
    'conv2d': _conv2d_checks,
    'sparse_conv': _sparse_conv_checks,
    'sparse_transposed_conv': _sparse_transposed_checks,
    'eca': _eca_checks,
    'gem': _gem_checks,
    'batchnorm': _batchnorm_checks,
    'elementwise': _elementwise_checks,
    'triplet_loss': _triplet_checks,
    'multi_head_loss': _multi_head_checks,
    'pc_branch': _pc_branch_checks,
    'network': _network_checks,
}


def run_gradcheck(ops: Optional[Sequence[str]] = None, eps: float = 1e-5, tolerance: float = 1e-5,
                  seed: int = 0, max_coords: Optional[int] = DEFAULT_MAX_COORDS) -> List[GradcheckResult]:
    """Check every input of every selected op in 64-bit.

    Inputs with at most max_coords entries are checked at every coordinate,
    larger ones at max_coords coordinates drawn without replacement. Whole-branch
    checks pass below the larger of tolerance and BRANCH_TOLERANCE.
    """
    names = list(ops) if ops else list(OPS)
    unknown = [name for name in names if name not in OPS]
    if unknown:
        raise ConfigError(f"unknown gradcheck op(s) {unknown}; expected one of {sorted(OPS)}")
    results: List[GradcheckResult] = []
    started = time.perf_counter()
    with precision('f64'):
        for name in names:
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            for check in OPS[name](rng):
                error = finite_difference_check(check.f, check.x, eps, max_coords, rng)
                bound = tolerance if check.tolerance is None else max(tolerance, check.tolerance)
                results.append(GradcheckResult(name, check.label, error, error < bound))
                logger.debug("gradcheck %s/%s: %.3e", name, check.label, error)
    logger.info("gradcheck: %d checks in %.1f s", len(results), time.perf_counter() - started)
    return results


def format_results(results: Sequence[GradcheckResult]) -> str:
    lines = ['op\tinput\tmax_rel_error\tstatus']
    lines += [f"{r.op}\t{r.label}\t{r.max_error:.3e}\t{'PASS' if r.passed else 'FAIL'}" for r in results]
    return '\n'.join(lines) + '\n'
