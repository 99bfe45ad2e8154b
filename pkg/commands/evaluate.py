"""
eval: retrieval metrics of a trained checkpoint.
"""
import os

import click

from commands.common import handle_errors, resolve_run_config, run_options, show_progress, write_text
from dataset.dataset import Dataset, run_split
from errors import ArtifactMismatchError
from models.checkpoint import load_model, read_checkpoint
from models.tensor import precision as numeric_precision
from services.evaluator import evaluate_all_pairs, evaluate_held_out, format_report

REPORT_FILE = 'report.tsv'
RANKINGS_FILE = 'rankings.tsv'


@click.command('eval')
@run_options(out_help='Directory for report.tsv (and rankings.tsv).')
@click.option('--checkpoint', type=click.Path(dir_okay=False), required=True, help='Checkpoint file.')
@click.option('--data', 'data_dir', type=click.Path(file_okay=False), required=True, help='Dataset directory.')
@click.option('--modality', type=click.Choice(['fused', 'pc', 'rgb']), default=None,
              help="Descriptor head to evaluate; defaults to the model's own.")
@click.option('--protocol', type=click.Choice(['held-out', 'all-pairs']), default='held-out', show_default=True)
@click.option('--dump-rankings', is_flag=True, default=False, help='Write the top entries of every query.')
@click.option('--k', type=int, default=None, help='Expected descriptor width; must match the checkpoint.')
@handle_errors
def evaluate(config_path, seed, threads, precision, out, checkpoint, data_dir, modality, protocol,
             dump_rankings, k):
    """Evaluate a checkpoint with Recall@N and AR@1%."""
    run_cfg = resolve_run_config(config_path, seed, threads, precision)
    header_cfg, _ = read_checkpoint(checkpoint)
    if k is not None and k != header_cfg.network.k:
        raise ArtifactMismatchError(f"--k {k} does not match the checkpoint's descriptor width {header_cfg.network.k}")

    with numeric_precision(precision or header_cfg.precision):
        model, cfg = load_model(checkpoint)
        head = modality or model.modality
        dataset = Dataset.load(data_dir)
        _, eval_set = run_split(dataset, cfg.data.query_traversal, cfg.data.test_region)
        if protocol == 'held-out':
            result = evaluate_held_out(model, eval_set, cfg.evaluation, cfg.data.query_traversal, head,
                                       cfg.quantization, run_cfg.threads, show_progress(), dump_rankings)
        else:
            result = evaluate_all_pairs(model, eval_set, cfg.evaluation, head, cfg.quantization,
                                        run_cfg.threads, show_progress())

    report = format_report(result)
    click.echo(report, nl=False)
    if out:
        click.echo(f"[OK] report written to {write_text(os.path.join(out, REPORT_FILE), report)}")
        if result.rankings:
            path = write_text(os.path.join(out, RANKINGS_FILE), result.rankings)
            click.echo(f"[OK] rankings written to {path}")
    elif result.rankings:
        click.echo(result.rankings, nl=False)
