import logging

from tensor_adapters.adapters import METHOD_LORA_PT
from tensor_adapters.cli import TensorCommand, add_dtype_argument, check_dtype, invalid_args
from tensor_adapters.container import save_adapter
from tensor_adapters.exceptions import NumericError
from tensor_adapters.experiments import record_run, run_toy_experiment
from tensor_adapters.forms import load_experiment_config

logger = logging.getLogger(__name__)


class Command(TensorCommand):
    help = 'Train the toy encoder under one adapter method and rank'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, type=str, help='Experiment config (key = value lines)')
        parser.add_argument(
            '--save-adapter', dest='save_adapter', type=str, default=None,
            help='Write the trained LoRA-PT factors to this adapter container',
        )
        add_dtype_argument(parser)

    def run(self, *args, **options):
        dtype = check_dtype(options['dtype'])
        config = load_experiment_config(options['config'])
        if options['save_adapter'] and config.method != METHOD_LORA_PT:
            raise invalid_args(f"--save-adapter needs method {METHOD_LORA_PT}, config has {config.method}")

        self.stdout.write(f"Training {config.method} r={config.rank} for {config.train.total_iters} steps")
        try:
            result = run_toy_experiment(config)
        except NumericError:
            record_run(config, status='FAILED')
            raise
        record_run(config, result)

        if options['save_adapter']:
            adapter = result.model.weight_source.to_adapter()
            save_adapter(options['save_adapter'], adapter, storage_dtype=dtype, meta={'trained_steps': config.train.total_iters})
            self.stdout.write(f"Saved trained adapter to {options['save_adapter']}")

        self.stdout.write(self.style.SUCCESS(
            f"method={result.method} rank={result.rank} params={result.params} seed={result.seed}\n"
            f"initial_loss={result.initial_loss:.6e} final_loss={result.final_loss:.6e}"
        ))
