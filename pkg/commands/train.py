"""
train: fit a model on a dataset directory (or a freshly generated one).
"""
import os

import click

from commands.common import handle_errors, resolve_run_config, run_options, settings, show_progress
from commands.data import generate, synthetic_options
from config import Config
from dataset.dataset import Dataset
from models.tensor import precision as numeric_precision
from services.trainer import run_training


@click.command('train')
@run_options(out_default=Config.RUNS_DIR, out_help='Run directory for checkpoints and the training log.')
@click.option('--data', 'data_dir', type=click.Path(file_okay=False), default=None,
              help='Dataset directory; generated under <out>/data when omitted.')
@click.option('--epochs', type=click.IntRange(min=1), default=None, help='Training epochs.')
@click.option('--alpha', type=float, default=None, help='Weight of the point-cloud head loss.')
@click.option('--beta', type=float, default=None, help='Weight of the image head loss.')
@click.option('--val-every', type=click.IntRange(min=0), default=None, help='Validate every N epochs (0 = never).')
@click.option('--save-every', type=click.IntRange(min=0), default=None,
              help='Write an intermediate checkpoint every N epochs (0 = never).')
@synthetic_options
@handle_errors
def train(config_path, seed, threads, precision, out, data_dir, epochs, alpha, beta, val_every, save_every,
          places, traversals, spacing, spurious_rgb, points, image_size, variants):
    """Train a place-recognition model."""
    extra = {'loss.alpha': alpha, 'loss.beta': beta, 'val_every': val_every, 'save_every': save_every}
    if epochs is not None:
        base = resolve_run_config(config_path, seed, threads, precision)
        extra['optimizer.epochs'] = epochs
        extra['optimizer.lr_drop_epoch'] = min(base.optimizer.lr_drop_epoch, epochs)
    cfg = resolve_run_config(config_path, seed, threads, precision, extra)
    out = out or settings().RUNS_DIR

    if data_dir is None:
        data_dir = os.path.join(out, 'data')
        click.echo(f"[INFO] no --data given, generating a synthetic dataset in {data_dir}")
        dataset = generate(data_dir, cfg.seed, cfg.data.query_traversal, places, traversals, spacing,
                           spurious_rgb, points, image_size, variants)
    else:
        dataset = Dataset.load(data_dir)

    click.echo(f"[INFO] training {cfg.network.modality} model for {cfg.optimizer.epochs} epoch(s) "
               f"on {len(dataset)} elements ({cfg.precision})")
    with numeric_precision(cfg.precision):
        result = run_training(cfg, dataset, out, progress=show_progress())

    if result.history:
        last = result.history[-1]
        click.echo(f"[INFO] final epoch loss {last.total:.6f}, batch size {last.batch_size}")
    for epoch, recall in sorted(result.validation.items()):
        click.echo(f"[INFO] validation after epoch {epoch}: recall@1 {recall:.4f}")
    click.echo(f"[OK] checkpoint {result.checkpoint} (sha256 {result.digest[:12]})")
    click.echo(f"[OK] training log {result.log_path}")
