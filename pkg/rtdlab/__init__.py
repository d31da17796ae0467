import logging

import click
from dotenv import load_dotenv

from .commands import register_commands
from .config import load_settings

__version__ = '0.1.0'


def create_cli():
    load_dotenv()
    settings = load_settings()

    logging.basicConfig(
        level=getattr(logging, settings.log_level, logging.INFO),
        format='%(asctime)s - %(levelname)s - %(message)s',
    )

    @click.group(help='Replaced-token detection pretraining lab.')
    @click.version_option(__version__, prog_name='rtdlab')
    def cli():
        pass

    # subcommands
    register_commands(cli)
    return cli
