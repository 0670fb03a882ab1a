import logging

from tensor_adapters.adapters import METHOD_FULL, METHODS, param_count
from tensor_adapters.cli import TensorCommand, invalid_args
from tensor_adapters.conf import get_setting

logger = logging.getLogger(__name__)


class Command(TensorCommand):
    help = 'Print the trainable encoder parameter count of an adapter method'

    def add_arguments(self, parser):
        parser.add_argument('--method', required=True, type=str, help=f"One of {', '.join(METHODS)}")
        parser.add_argument('--d', type=int, default=get_setting('DEFAULT_D'))
        parser.add_argument('--layers', type=int, default=get_setting('DEFAULT_LAYERS'))
        parser.add_argument('--rank', type=int, default=1)
        parser.add_argument(
            '--share', action='store_true',
            help='Also print the count as a share of full fine-tuning',
        )

    def run(self, *args, **options):
        method, d, layers, rank = options['method'], options['d'], options['layers'], options['rank']
        if method not in METHODS:
            raise invalid_args(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
        if rank > d:
            raise invalid_args(f"--rank {rank} exceeds d={d}")

        count = param_count(method, d, layers, rank)
        full = param_count(METHOD_FULL, d, layers, rank)
        share = f"{100.0 * count / full:.4f}% of full fine-tuning ({full})"
        logger.info(f"{method} d={d} L={layers} r={rank}: {count} parameters, {share}")
        self.stdout.write(str(count))
        if options['share']:
            self.stdout.write(share)
