import logging
import os

import click

from config import get_config


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
        force=True,
    )


def create_cli(config_name=None):
    """Command-line factory pattern."""
    if config_name is None:
        config_name = os.environ.get('WAYMARK_ENV', 'default')
    settings = get_config(config_name)

    @click.group(context_settings={'help_option_names': ['-h', '--help']})
    @click.pass_context
    def cli(ctx):
        """Waymark: multimodal place recognition on point clouds and images."""
        ctx.obj = settings
        configure_logging(settings.LOG_LEVEL)

    # Register commands
    from commands import diagnose, evaluate, gen_data, gradcheck, train

    cli.add_command(gen_data)
    cli.add_command(train)
    cli.add_command(evaluate)
    cli.add_command(diagnose)
    cli.add_command(gradcheck)

    return cli


if __name__ == '__main__':
    create_cli()()
