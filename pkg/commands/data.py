"""
gen-data: write a synthetic desk-scale dataset.
"""
import click

from commands.common import handle_errors, resolve_run_config, run_options
from dataset.synthetic import SyntheticSpec, generate_synthetic
from errors import DataError


def synthetic_options(f):
    """Generator flags, shared with `train` for on-the-fly datasets."""
    f = click.option('--variants', type=int, default=3, show_default=True, help='Image variants per element.')(f)
    f = click.option('--image-size', type=int, default=64, show_default=True, help='Image side in pixels.')(f)
    f = click.option('--points', type=int, default=4096, show_default=True, help='Points per cloud.')(f)
    f = click.option('--spurious-rgb', is_flag=True, default=False,
                     help='Stamp a place code into training-traversal images only.')(f)
    f = click.option('--spacing', type=float, default=100.0, show_default=True,
                     help='Distance between places in meters (must exceed 50).')(f)
    f = click.option('--traversals', type=int, default=4, show_default=True, help='Traversals per place.')(f)
    f = click.option('--places', type=int, default=40, show_default=True, help='Number of places.')(f)
    return f


def generate(out_dir: str, seed: int, query_traversal: int, places: int, traversals: int, spacing: float,
             spurious_rgb: bool, points: int, image_size: int, variants: int):
    spec = SyntheticSpec(places, traversals, spacing, seed=seed, points=points, image_size=image_size,
                         variants=variants, spurious_rgb=spurious_rgb, held_out_traversal=query_traversal)
    dataset, check = generate_synthetic(out_dir, spec)
    click.echo(f"[OK] wrote {len(dataset)} elements ({places} places x {traversals} traversals) to {out_dir}")
    if check is not None:
        click.echo(f"[INFO] {check.line()}")
        if not check.passed:
            raise DataError("spurious-cue self-check failed")
    return dataset


@click.command('gen-data')
@run_options(out_default='data', out_help='Dataset directory to create.')
@synthetic_options
@handle_errors
def gen_data(config_path, seed, threads, precision, out, places, traversals, spacing, spurious_rgb,
             points, image_size, variants):
    """Generate a synthetic place-recognition dataset."""
    cfg = resolve_run_config(config_path, seed, threads, precision)
    generate(out, cfg.seed, cfg.data.query_traversal, places, traversals, spacing, spurious_rgb,
             points, image_size, variants)
