"""
End-to-end runs at desk scale. Slow: deselected unless run with `-m slow`.
"""
import pytest

from config import BatchConfig, LossConfig, NetworkConfig, OptimizerConfig, RunConfig
from dataset.dataset import run_split
from dataset.synthetic import SyntheticSpec, generate_synthetic
from models.checkpoint import load_model
from models.tensor import precision
from services.evaluator import evaluate_held_out, modality_diagnostic, sample_batches
from services.trainer import run_training

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)


def small_run(seed, alpha=0.5, beta=0.5, epochs=20):
    return RunConfig(
        seed=seed,
        network=NetworkConfig(k=32, pc_channels=(8, 8, 16), image_channels=(8, 16)),
        optimizer=OptimizerConfig(epochs=epochs, lr_drop_epoch=15),
        batch=BatchConfig(initial_size=8, max_size=32),
        loss=LossConfig(alpha=alpha, beta=beta),
    )


def held_out_recall(checkpoint, dataset):
    model, cfg = load_model(checkpoint)
    _, eval_set = run_split(dataset, cfg.data.query_traversal, cfg.data.test_region)
    return model, cfg, evaluate_held_out(model, eval_set, cfg.evaluation, cfg.data.query_traversal).recalls[1]


@pytest.mark.parametrize('seed', SEEDS)
def test_fused_recall(tmp_path, seed):
    """40 places, 4 traversals, 20 epochs: fused Recall@1 of at least 0.9."""
    dataset, _ = generate_synthetic(str(tmp_path / 'data'), SyntheticSpec(40, 4, 100.0, seed=seed))
    cfg = small_run(seed)
    with precision(cfg.precision):
        result = run_training(cfg, dataset, str(tmp_path / 'run'))
        _, _, recall = held_out_recall(result.checkpoint, dataset)
    assert recall >= 0.9


@pytest.mark.parametrize('seed', SEEDS)
def test_dominating_image_modality(tmp_path, seed):
    """Watermarked training images: the image space overfits, and unimodal heads help the fused one."""
    dataset, check = generate_synthetic(str(tmp_path / 'data'),
                                        SyntheticSpec(40, 4, 100.0, seed=seed, spurious_rgb=True))
    assert check.passed
    with precision('f32'):
        joint = run_training(small_run(seed, 0.0, 0.0), dataset, str(tmp_path / 'joint'))
        model, cfg, joint_recall = held_out_recall(joint.checkpoint, dataset)
        train_set, _ = run_split(dataset, cfg.data.query_traversal, cfg.data.test_region)
        held_out = dataset.resolve_traversal(cfg.data.query_traversal)
        report = modality_diagnostic(
            model,
            sample_batches(train_set, 8, 16, seed, cfg.quantization, cfg.loss),
            sample_batches(dataset, 8, 16, seed, cfg.quantization, cfg.loss, anchor_traversal=held_out),
            cfg.loss)

        multi = run_training(small_run(seed, 0.5, 0.0), dataset, str(tmp_path / 'multi'))
        _, _, multi_recall = held_out_recall(multi.checkpoint, dataset)

    assert report.train_delta < 0
    assert report.val_delta > 0
    assert multi_recall >= joint_recall
