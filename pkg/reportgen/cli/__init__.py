import logging

import click

from reportgen import __version__, setup_logging
from reportgen.cli.routes import register_commands


@click.group()
@click.version_option(__version__, prog_name="reportgen")
@click.option("--log-file", type=click.Path(), default=None, help="Also write logs to this rotating file.")
@click.option("--verbose", is_flag=True, help="Log debug messages.")
def cli(log_file, verbose):
    """Image-conditioned report generation: data, tokenizer, training, generation and evaluation."""
    setup_logging(log_file, logging.DEBUG if verbose else logging.INFO)


register_commands(cli)
