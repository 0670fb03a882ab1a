import logging

import torch

from tensor_adapters.cli import TensorCommand, add_dtype_argument, check_dtype, invalid_args
from tensor_adapters.conf import get_setting
from tensor_adapters.container import save_checkpoint
from tensor_adapters.adapters import EncoderWeights

logger = logging.getLogger(__name__)


class Command(TensorCommand):
    help = 'Write a seeded synthetic encoder checkpoint with correlated layers'

    def add_arguments(self, parser):
        parser.add_argument('--out', required=True, type=str, help='Checkpoint path to write')
        parser.add_argument('--d', type=int, default=get_setting('DEFAULT_D'), help='Hidden dimension')
        parser.add_argument('--layers', type=int, default=get_setting('DEFAULT_LAYERS'), help='Layer count')
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument(
            '--correlation', type=float, default=0.5,
            help='Share of every matrix drawn from a component common to all layers (0..1)',
        )
        add_dtype_argument(parser)

    def run(self, *args, **options):
        d, layers = options['d'], options['layers']
        if d < 1 or layers < 1:
            raise invalid_args(f"--d and --layers must be positive, got d={d}, layers={layers}")
        dtype = check_dtype(options['dtype'])

        generator = torch.Generator().manual_seed(options['seed'])
        weights = EncoderWeights.random(d, layers, generator, correlation=options['correlation'])
        meta = {'seed': options['seed'], 'correlation': options['correlation']}
        save_checkpoint(options['out'], weights, storage_dtype=dtype, meta=meta)

        logger.info(f"Synthetic checkpoint d={d} L={layers} written to {options['out']}")
        self.stdout.write(self.style.SUCCESS(
            f"Wrote {options['out']}: d={d}, layers={layers}, {6 * layers} matrices ({dtype})"
        ))
