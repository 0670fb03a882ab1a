import logging

from tensor_adapters.adapters import effective_weights
from tensor_adapters.cli import TensorCommand, add_dtype_argument, check_dtype
from tensor_adapters.container import load_adapter, save_checkpoint

logger = logging.getLogger(__name__)


class Command(TensorCommand):
    help = 'Fold a LoRA-PT adapter (principal + residual) back into a checkpoint'

    def add_arguments(self, parser):
        parser.add_argument('--adapter', required=True, type=str, help='Adapter container')
        parser.add_argument('--out', required=True, type=str, help='Checkpoint container to write')
        add_dtype_argument(parser)

    def run(self, *args, **options):
        dtype = check_dtype(options['dtype'])
        adapter = load_adapter(options['adapter'])
        weights = effective_weights(adapter)
        save_checkpoint(options['out'], weights, storage_dtype=dtype, meta={'merged_rank': adapter.rank})

        logger.info(f"Merged {options['adapter']} (r={adapter.rank}) into {options['out']}")
        self.stdout.write(self.style.SUCCESS(
            f"Wrote {options['out']}: d={weights.d}, layers={weights.L}"
        ))
