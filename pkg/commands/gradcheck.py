"""
gradcheck: finite-difference check of every differentiable op.
"""
import os

import click

from commands.common import handle_errors, resolve_run_config, run_options, write_text
from errors import NumericError
from services.gradcheck import DEFAULT_MAX_COORDS, EPS_RANGE, OPS, format_results, run_gradcheck

RESULTS_FILE = 'gradcheck.tsv'


@click.command('gradcheck')
@run_options(out_help='Directory for gradcheck.tsv.')
@click.option('--op', 'ops', type=click.Choice(sorted(OPS)), multiple=True,
              help='Op to check (repeatable); all ops when omitted.')
@click.option('--eps', type=float, default=1e-5, show_default=True, help='Central-difference step.')
@click.option('--tolerance', type=float, default=1e-5, show_default=True, help='Maximum relative error.')
@click.option('--max-coords', type=click.IntRange(min=1), default=DEFAULT_MAX_COORDS, show_default=True,
              help='Inputs up to this many entries are checked at every coordinate; '
                   'larger ones at this many randomly drawn coordinates.')
@handle_errors
def gradcheck(config_path, seed, threads, precision, out, ops, eps, tolerance, max_coords):
    """Compare analytic gradients with central differences in 64-bit."""
    cfg = resolve_run_config(config_path, seed, threads, precision)
    if not EPS_RANGE[0] <= eps <= EPS_RANGE[1]:
        click.echo(f"[WARNING] --eps {eps:g} is outside [{EPS_RANGE[0]:g}, {EPS_RANGE[1]:g}]")
    results = run_gradcheck(ops, eps, tolerance, cfg.seed, max_coords)
    table = format_results(results)
    click.echo(table, nl=False)
    if out:
        click.echo(f"[OK] results written to {write_text(os.path.join(out, RESULTS_FILE), table)}")
    failed = [f"{r.op}/{r.label}" for r in results if not r.passed]
    if failed:
        raise NumericError(f"{len(failed)} of {len(results)} gradient checks above {tolerance:g}: "
                           + ', '.join(failed))
    click.echo(f"[OK] {len(results)} gradient checks passed")
