import logging
import sys

from logging.handlers import RotatingFileHandler

from config import Config

__version__ = "0.1.0"


def setup_logging(log_file=None, level=logging.INFO, config_class=Config):
    """
    Configures package-wide logging.

    Attaches a stdout handler and, when `log_file` is given, a rotating file
    handler. Calling it again replaces the handlers instead of stacking them.
    """
    logger = logging.getLogger(__name__)
    logger.setLevel(level)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(logging.Formatter(config_class.LOG_FORMAT))
    logger.addHandler(console_handler)

    log_file = log_file or config_class.LOG_FILE
    if log_file:
        file_handler = RotatingFileHandler(
            log_file, maxBytes=config_class.LOG_MAX_BYTES, backupCount=config_class.LOG_BACKUP_COUNT
        )
        file_handler.setFormatter(logging.Formatter(config_class.LOG_FORMAT))
        logger.addHandler(file_handler)

    return logger


def create_cli():
    """Returns the `reportgen` command group with every subcommand registered."""
    from reportgen.cli import cli

    return cli
