import logging

from django.core.management.base import CommandError

from tensor_adapters.cli import EXIT_FAILURE, TensorCommand, invalid_args
from tensor_adapters.verification import SUITES, run_suite

logger = logging.getLogger(__name__)


class Command(TensorCommand):
    help = 'Run a seeded property suite (tprod, tsvd, grad, metrics)'

    def add_arguments(self, parser):
        parser.add_argument('--suite', required=True, type=str, help=f"One of {', '.join(SUITES)}")
        parser.add_argument('--seed', type=int, default=0)

    def run(self, *args, **options):
        suite, seed = options['suite'], options['seed']
        if suite not in SUITES:
            raise invalid_args(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")

        results = run_suite(suite, seed)
        failed = []
        for result in results:
            if result.passed:
                self.stdout.write(self.style.SUCCESS(f"PASS {result.name}: {result.detail}"))
            else:
                failed.append(result.name)
                self.stdout.write(self.style.ERROR(f"FAIL {result.name}: {result.detail}"))

        if failed:
            message = f"suite {suite} failed with seed {seed}: {', '.join(failed)}"
            logger.error(message)
            raise CommandError(message, returncode=EXIT_FAILURE)
        self.stdout.write(f"suite {suite}, seed {seed}: {len(results)} properties passed")
