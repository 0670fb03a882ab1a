import logging

from django.core.management.base import CommandError

from tensor_adapters.cli import EXIT_UNDEFINED_METRIC, TensorCommand, invalid_args
from tensor_adapters.conf import get_setting
from tensor_adapters.container import load_mask
from tensor_adapters.exceptions import UndefinedMetricError
from tensor_adapters.segmetrics import dice, hd95, remove_small_components

logger = logging.getLogger(__name__)


class Command(TensorCommand):
    help = 'Print Dice and HD95 between a predicted and a ground-truth mask'

    def add_arguments(self, parser):
        parser.add_argument('--pred', required=True, type=str, help='Predicted mask container')
        parser.add_argument('--gt', required=True, type=str, help='Ground-truth mask container')
        parser.add_argument(
            '--postprocess', type=float, nargs='?', default=None,
            const=get_setting('POSTPROCESS_MM3'),
            help='Drop predicted components smaller than this volume in mm^3 (bare flag: 1000)',
        )

    def run(self, *args, **options):
        threshold = options['postprocess']
        if threshold is not None and threshold < 0:
            raise invalid_args(f"--postprocess must be nonnegative, got {threshold}")

        pred = load_mask(options['pred'])
        gt = load_mask(options['gt'])
        if threshold is not None:
            before = pred.count()
            pred = remove_small_components(pred, threshold)
            logger.info(f"Post-processing removed {before - pred.count()} voxels below {threshold} mm^3")

        dice_value = dice(pred, gt)
        try:
            hd_value = hd95(pred, gt)
        except UndefinedMetricError as e:
            self.stdout.write(f"dice={dice_value} hd95=undefined")
            logger.error(f"HD95 undefined: {str(e)}")
            raise CommandError(str(e), returncode=EXIT_UNDEFINED_METRIC) from e
        self.stdout.write(f"dice={dice_value} hd95={hd_value}")
