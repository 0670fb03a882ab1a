"""
Shared plumbing for the management commands: exit codes and the
translation of library errors into ``CommandError``.

Exit codes: 0 success, 1 verification or numeric failure, 2 malformed
input (container or config), 3 invalid arguments, 4 undefined metric.
"""

import logging
import sys
from functools import partial

from django.core.management.base import BaseCommand, CommandError

from .conf import configure_threads, get_setting
from .exceptions import (
    ConfigError,
    ContainerError,
    InvalidArgumentError,
    TensorAdapterError,
    UndefinedMetricError,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_MALFORMED = 2
EXIT_INVALID_ARGS = 3
EXIT_UNDEFINED_METRIC = 4


def exit_code_for(exc):
    if isinstance(exc, UndefinedMetricError):
        return EXIT_UNDEFINED_METRIC
    if isinstance(exc, (ContainerError, ConfigError)):
        return EXIT_MALFORMED
    if isinstance(exc, InvalidArgumentError):
        return EXIT_INVALID_ARGS
    return EXIT_FAILURE


def _usage_error(parser, message):
    if parser.called_from_command_line:
        parser.print_usage(sys.stderr)
        parser.exit(EXIT_INVALID_ARGS, f"{parser.prog}: error: {message}\n")
    raise CommandError(f"Error: {message}", returncode=EXIT_INVALID_ARGS)


def invalid_args(message):
    logger.error(message)
    return CommandError(message, returncode=EXIT_INVALID_ARGS)


def parse_int_list(text, what):
    """'1,2,4' -> [1, 2, 4]; anything else is an invalid argument."""
    try:
        values = [int(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise invalid_args(f"{what} must be a comma-separated list of integers, got {text!r}")
    if not values:
        raise invalid_args(f"{what} is empty")
    return values


def add_dtype_argument(parser):
    parser.add_argument(
        '--dtype',
        default=get_setting('STORAGE_DTYPE'),
        help='Storage dtype for written arrays: f32 (default) or f64',
    )


def check_dtype(value):
    if value not in ('f32', 'f64'):
        raise invalid_args(f"--dtype must be f32 or f64, got {value!r}")
    return value


class TensorCommand(BaseCommand):
    """
    Base for this app's commands. Subclasses implement ``run``; library
    errors leave as ``CommandError`` carrying the matching exit code, and
    argument parsing errors exit with code 3 instead of argparse's 2.
    """

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        parser.error = partial(_usage_error, parser)
        return parser

    def handle(self, *args, **options):
        configure_threads()
        try:
            return self.run(*args, **options)
        except TensorAdapterError as e:
            code = exit_code_for(e)
            logger.error(f"{type(e).__name__}: {str(e)}")
            raise CommandError(str(e), returncode=code) from e

    def run(self, *args, **options):
        raise NotImplementedError('subclasses of TensorCommand must provide a run() method')
