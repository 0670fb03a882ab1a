import json
import logging

from tensor_adapters.cli import TensorCommand
from tensor_adapters.container import read_container

logger = logging.getLogger(__name__)


class Command(TensorCommand):
    help = 'Validate a TSPT0001 container and print its arrays and meta'

    def add_arguments(self, parser):
        parser.add_argument('path', type=str, help='Path to the container file')

    def run(self, *args, **options):
        path = options['path']
        logger.info(f"Inspecting {path}")
        container = read_container(path)

        self.stdout.write(f"{path}: TSPT0001, {len(container.entries)} arrays")
        for entry in container.entries:
            shape = 'x'.join(str(s) for s in entry['shape']) or 'scalar'
            self.stdout.write(
                f"  {entry['name']:<24} {entry['dtype']:<4} {shape:<18} "
                f"offset={entry['offset']} nbytes={entry['nbytes']}"
            )
        self.stdout.write(f"meta: {json.dumps(container.meta, sort_keys=True)}")
        self.stdout.write(self.style.SUCCESS("Header invariants hold"))
