"""
Shared command plumbing: common flags, run-config resolution and error mapping.
"""
import functools
import logging
import os
from typing import Any, Dict, Optional

import click

from config import RunConfig, get_config, load_run_config
from errors import WaymarkError

logger = logging.getLogger(__name__)

PRECISIONS = click.Choice(['f32', 'f64'])


def run_options(out_default: Optional[str] = None, out_help: str = 'Output directory.'):
    """--config, --seed, --threads, --precision and --out, shared by every command."""
    def decorator(f):
        f = click.option('--out', 'out', type=click.Path(file_okay=False), default=out_default,
                         show_default=True, help=out_help)(f)
        f = click.option('--precision', type=PRECISIONS, default=None, show_default='f32',
                         help='Float precision of the run.')(f)
        f = click.option('--threads', type=click.IntRange(min=1), default=None, show_default='1',
                         help='Worker threads for loading and descriptor extraction.')(f)
        f = click.option('--seed', type=int, default=None, show_default='0', help='Run seed.')(f)
        f = click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
                         help='Flat key = value run configuration file.')(f)
        return f
    return decorator


def handle_errors(f):
    """Echo [ERROR] and exit with the error's code instead of a traceback."""
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except WaymarkError as e:
            logger.debug("command failed", exc_info=True)
            click.echo(f"[ERROR] {e}", err=True)
            click.get_current_context().exit(e.exit_code)
    return wrapper


def resolve_run_config(config_path: Optional[str], seed: Optional[int], threads: Optional[int],
                       precision_name: Optional[str], extra: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Defaults < WAYMARK_* environment < config file < command-line flags."""
    env = settings()
    base = {'seed': env.SEED, 'threads': env.THREADS, 'precision': env.PRECISION}
    overrides: Dict[str, Any] = {'seed': seed, 'threads': threads, 'precision': precision_name}
    overrides.update(extra or {})
    return load_run_config(config_path, overrides, base)


def settings():
    """The environment Config class selected for this invocation."""
    ctx = click.get_current_context(silent=True)
    if ctx is not None and ctx.find_root().obj is not None:
        return ctx.find_root().obj
    return get_config()


def show_progress() -> bool:
    return bool(settings().PROGRESS_BARS)


def write_text(path: str, text: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        f.write(text)
    return path
