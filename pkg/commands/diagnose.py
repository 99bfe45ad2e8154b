"""
diagnose: active triplets per modality on training and validation batches.
"""
import os

import click

from commands.common import handle_errors, resolve_run_config, run_options, write_text
from dataset.dataset import Dataset, run_split
from models.checkpoint import load_model, read_checkpoint
from models.tensor import precision as numeric_precision
from services.evaluator import format_active_block, modality_diagnostic, sample_batches

DIAGNOSTIC_FILE = 'diagnostic.tsv'


@click.command('diagnose')
@run_options(out_help='Directory for diagnostic.tsv.')
@click.option('--checkpoint', type=click.Path(dir_okay=False), required=True, help='Fused-model checkpoint.')
@click.option('--data', 'data_dir', type=click.Path(file_okay=False), required=True,
              help='Training dataset; batches come from its training split.')
@click.option('--val-data', 'val_dir', type=click.Path(file_okay=False), required=True,
              help='Validation dataset; positives pair the query traversal with the others.')
@click.option('--batches', type=click.IntRange(min=1), default=8, show_default=True, help='Batches per split.')
@click.option('--batch-size', type=click.IntRange(min=2), default=16, show_default=True)
@handle_errors
def diagnose(config_path, seed, threads, precision, out, checkpoint, data_dir, val_dir, batches, batch_size):
    """Count active triplets on the point-cloud and image descriptors separately."""
    run_cfg = resolve_run_config(config_path, seed, threads, precision)
    header_cfg, _ = read_checkpoint(checkpoint)
    with numeric_precision(precision or header_cfg.precision):
        model, cfg = load_model(checkpoint)
        train_set, _ = run_split(Dataset.load(data_dir), cfg.data.query_traversal, cfg.data.test_region)
        val_set = Dataset.load(val_dir)
        anchor = val_set.resolve_traversal(cfg.data.query_traversal)
        train_batches = sample_batches(train_set, batches, batch_size, run_cfg.seed, cfg.quantization,
                                       cfg.loss, run_cfg.threads)
        val_batches = sample_batches(val_set, batches, batch_size, run_cfg.seed, cfg.quantization,
                                     cfg.loss, run_cfg.threads, anchor_traversal=anchor)
        report = modality_diagnostic(model, train_batches, val_batches, cfg.loss)

    block = format_active_block(report)
    click.echo(block, nl=False)
    if report.val_delta > report.train_delta:
        click.echo("[WARNING] the image space keeps more active triplets on validation than on training")
    if out:
        click.echo(f"[OK] diagnostic written to {write_text(os.path.join(out, DIAGNOSTIC_FILE), block)}")
