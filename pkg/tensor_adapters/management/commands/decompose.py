import logging

from tensor_adapters.adapters import METHOD_LORA_PT, build_lorapt, param_count, tensorize
from tensor_adapters.cli import TensorCommand, add_dtype_argument, check_dtype, invalid_args
from tensor_adapters.conf import get_setting
from tensor_adapters.container import load_checkpoint, save_adapter
from tensor_adapters.tsvd import captured_energy, fourier_singular_values, tubal_rank

logger = logging.getLogger(__name__)


class Command(TensorCommand):
    help = 'Split a checkpoint into LoRA-PT principal factors and frozen residuals'

    def add_arguments(self, parser):
        parser.add_argument('--in', dest='input_path', required=True, type=str, help='Checkpoint container')
        parser.add_argument('--rank', required=True, type=int, help='Tubal rank r of the principal part')
        parser.add_argument('--out', required=True, type=str, help='Adapter container to write')
        add_dtype_argument(parser)

    def run(self, *args, **options):
        rank = options['rank']
        if rank < 1:
            raise invalid_args(f"--rank must be >= 1, got {rank}")
        dtype = check_dtype(options['dtype'])

        weights = load_checkpoint(options['input_path'])
        if rank > weights.d:
            raise invalid_args(f"--rank {rank} exceeds d={weights.d}")

        tolerance = get_setting('TUBAL_RANK_TOL')
        stacked = tensorize(weights)
        for name, tensor in stacked.named().items():
            sigma = fourier_singular_values(tensor)
            self.stdout.write(
                f"{name} {tensor.n1}x{tensor.n2}x{tensor.n3}: "
                f"sigma_1 max={float(sigma[:, 0].max()):.6g} min={float(sigma[:, 0].min()):.6g}, "
                f"tubal rank {tubal_rank(tensor, tol=tolerance)}, "
                f"energy captured at r={rank}: {100.0 * captured_energy(tensor, rank):.2f}%"
            )

        adapter = build_lorapt(stacked, rank)
        save_adapter(options['out'], adapter, storage_dtype=dtype)

        count = adapter.trainable_parameter_count()
        expected = param_count(METHOD_LORA_PT, weights.d, weights.L, rank)
        if count != expected:
            logger.warning(f"stored factor sizes give {count} parameters, formula gives {expected}")
        logger.info(f"Decomposed {options['input_path']} at r={rank} into {options['out']}")
        self.stdout.write(f"trainable parameters: {count}")
        self.stdout.write(self.style.SUCCESS(f"Wrote adapter {options['out']}"))
