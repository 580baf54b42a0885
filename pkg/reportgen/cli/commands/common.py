import functools
import json
import logging

import click

from errors import ErrorCode, ReportGenError
from reportgen import __version__
from reportgen.models import RunManifest

logger = logging.getLogger(__name__)

MANIFEST_SUFFIX = ".manifest.json"


def handle_errors(func):
    """
    Decorator to handle exceptions for CLI commands.

    Args:
        func (function): The command callback being wrapped.

    Returns:
        function: A wrapped callback that turns pipeline errors into a single
        `error code=... exit=...` line on stderr and the matching exit status.
    """

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except (click.exceptions.Exit, click.ClickException, click.Abort):
            raise
        except ReportGenError as e:
            logger.error(f"{func.__name__} failed: {e}")
            click.echo(e.one_line(), err=True)
            click.get_current_context().exit(e.code.exit_code)
        except Exception as e:
            logger.critical(f"Unexpected internal error: {e}", exc_info=True)
            message = ErrorCode.INTERNAL.format_message(str(e)).replace("\n", " ")
            click.echo(f"error code={ErrorCode.INTERNAL.name} exit={ErrorCode.INTERNAL.exit_code} message={message}", err=True)
            click.get_current_context().exit(ErrorCode.INTERNAL.exit_code)

    return wrapper


def write_json(path, payload):
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(payload, handle, sort_keys=True, indent=2)
        handle.write("\n")


def write_manifest(output_path, seed=None, **paths):
    """
    Writes the `RunManifest` of an output next to it as `<output>.manifest.json`.

    Raises:
        MissingPathError: If a referenced input path no longer exists.
    """
    manifest = RunManifest.capture(__version__, seed=seed, **paths)
    write_json(str(output_path) + MANIFEST_SUFFIX, manifest.to_dict())
    return manifest
