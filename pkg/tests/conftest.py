import numpy as np
import pytest
from click.testing import CliRunner

from app import create_cli
from config import BatchConfig, NetworkConfig, OptimizerConfig, RunConfig
from dataset.synthetic import SyntheticSpec, generate_synthetic
from models.network import PlaceRecognitionNet
from models.tensor import precision
from services.trainer import run_training

TINY_SPEC = SyntheticSpec(n_places=4, traversals=3, spacing_m=60.0, seed=3, points=256,
                          image_size=32, variants=2)


@pytest.fixture(autouse=True)
def f64():
    """Run every test in 64-bit."""
    with precision('f64'):
        yield


@pytest.fixture
def rng():
    """Seeded numpy generator."""
    return np.random.default_rng(0)


@pytest.fixture
def tiny_network():
    """Network small enough for per-test forward passes."""
    return NetworkConfig(k=8, pc_channels=(4, 4, 8), image_channels=(4, 8))


@pytest.fixture
def tiny_run_config(tiny_network):
    """One-epoch run over the tiny network."""
    return RunConfig(
        precision='f64',
        network=tiny_network,
        optimizer=OptimizerConfig(epochs=1, lr_drop_epoch=1),
        batch=BatchConfig(initial_size=4, max_size=8),
    )


@pytest.fixture
def tiny_model(tiny_run_config):
    """Freshly initialized fused model."""
    return PlaceRecognitionNet.from_run_config(tiny_run_config)


@pytest.fixture(scope='session')
def tiny_dataset(tmp_path_factory):
    """4 places x 3 traversals written to a temp directory."""
    dataset, _ = generate_synthetic(str(tmp_path_factory.mktemp('tiny-data')), TINY_SPEC)
    return dataset


@pytest.fixture(scope='session')
def trained_run(tmp_path_factory, tiny_dataset):
    """A fused model trained for one epoch on the tiny dataset."""
    cfg = RunConfig(
        precision='f64',
        network=NetworkConfig(k=8, pc_channels=(4, 4, 8), image_channels=(4, 8)),
        optimizer=OptimizerConfig(epochs=1, lr_drop_epoch=1),
        batch=BatchConfig(initial_size=4, max_size=8),
    )
    with precision('f64'):
        return run_training(cfg, tiny_dataset, str(tmp_path_factory.mktemp('run')))


@pytest.fixture
def runner():
    """Click test runner."""
    return CliRunner()


@pytest.fixture
def cli():
    """Command group under the testing configuration."""
    return create_cli('testing')
