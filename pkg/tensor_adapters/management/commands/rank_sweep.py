import logging
from dataclasses import replace

from tensor_adapters.adapters import METHODS
from tensor_adapters.cli import TensorCommand, invalid_args, parse_int_list
from tensor_adapters.conf import get_setting
from tensor_adapters.exceptions import NumericError
from tensor_adapters.experiments import rank_sweep, record_run, write_sweep_csv
from tensor_adapters.forms import load_experiment_config

logger = logging.getLogger(__name__)


class Command(TensorCommand):
    help = 'Train the toy encoder across a rank grid and write a CSV summary'

    def add_arguments(self, parser):
        parser.add_argument('--config', required=True, type=str, help='Experiment config (key = value lines)')
        parser.add_argument(
            '--ranks', type=str,
            default=','.join(str(r) for r in get_setting('SWEEP_RANKS')),
            help='Comma-separated ranks, e.g. 1,2,4',
        )
        parser.add_argument(
            '--methods', type=str, default=None,
            help='Comma-separated methods (default: the config method)',
        )
        parser.add_argument('--out', type=str, default=None, help='CSV path (default: stdout)')

    def run(self, *args, **options):
        ranks = parse_int_list(options['ranks'], '--ranks')
        methods = None
        if options['methods']:
            methods = [m.strip() for m in options['methods'].split(',') if m.strip()]
            unknown = [m for m in methods if m not in METHODS]
            if unknown:
                raise invalid_args(f"unknown methods: {', '.join(unknown)}")

        config = load_experiment_config(options['config'])
        bad = [r for r in ranks if r < 1 or r > config.model.d]
        if bad:
            raise invalid_args(f"ranks out of range 1..{config.model.d}: {bad}")

        try:
            results = rank_sweep(config, ranks, methods)
        except NumericError:
            record_run(config, status='FAILED')
            raise
        for result in results:
            record_run(replace(config, method=result.method, rank=result.rank), result)

        if options['out']:
            with open(options['out'], 'w', encoding='utf-8', newline='') as f:
                write_sweep_csv(results, f)
            logger.info(f"Sweep of {len(results)} runs written to {options['out']}")
            self.stdout.write(self.style.SUCCESS(f"Wrote {len(results)} rows to {options['out']}"))
        else:
            write_sweep_csv(results, self.stdout)
