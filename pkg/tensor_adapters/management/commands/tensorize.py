import logging

from tensor_adapters.adapters import tensorize
from tensor_adapters.cli import TensorCommand, add_dtype_argument, check_dtype
from tensor_adapters.container import load_checkpoint, save_stacked

logger = logging.getLogger(__name__)


class Command(TensorCommand):
    help = 'Stack a checkpoint into the w_sa, w_up and w_down tensors'

    def add_arguments(self, parser):
        parser.add_argument('--in', dest='input_path', required=True, type=str, help='Checkpoint container')
        parser.add_argument('--out', required=True, type=str, help='Stacked-tensor container to write')
        add_dtype_argument(parser)

    def run(self, *args, **options):
        dtype = check_dtype(options['dtype'])
        weights = load_checkpoint(options['input_path'])
        stacked = tensorize(weights)
        save_stacked(options['out'], stacked, storage_dtype=dtype)

        for name, tensor in stacked.named().items():
            self.stdout.write(f"{name}: {tensor.n1}x{tensor.n2}x{tensor.n3}")
        self.stdout.write(self.style.SUCCESS(f"Wrote {options['out']} ({stacked.stack_order})"))
