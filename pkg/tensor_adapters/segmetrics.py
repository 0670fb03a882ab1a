"""
Segmentation metrics, Dice loss and connected-component post-processing.

Conventions (fixed here because HD95 values are not comparable across them):

- boundary voxels: foreground voxels with at least one face-adjacent
  (6-connected) background or out-of-volume neighbour;
- HD95 percentile: nearest rank, the value at 1-based index ceil(0.95 n)
  of the sorted directed distances;
- components: 26-connected foreground;
- Dice of two empty masks is 1.0;
- Dice-loss smoothing eps = 1e-5.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage
from scipy.spatial import cKDTree

from .exceptions import InvalidArgumentError, UndefinedMetricError

logger = logging.getLogger(__name__)

DICE_LOSS_EPS = 1e-5
HD_PERCENTILE = 95
FACE_CONNECTIVITY = ndimage.generate_binary_structure(3, 1)
FULL_CONNECTIVITY = ndimage.generate_binary_structure(3, 3)


@dataclass(frozen=True)
class Mask3D:
    """Binary volume with per-axis voxel spacing in mm."""

    voxels: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        voxels = np.asarray(self.voxels)
        if voxels.ndim != 3:
            raise InvalidArgumentError(f"mask must be 3-d, got shape {voxels.shape}")
        if voxels.dtype != bool:
            if not np.isin(voxels, (0, 1)).all():
                raise InvalidArgumentError("mask voxels must be 0 or 1")
            voxels = voxels.astype(bool)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise InvalidArgumentError(f"spacing must be three positive values, got {spacing}")
        object.__setattr__(self, 'voxels', voxels)
        object.__setattr__(self, 'spacing', spacing)

    @property
    def dims(self):
        return self.voxels.shape

    @property
    def voxel_volume(self):
        return float(np.prod(self.spacing))

    def count(self):
        return int(self.voxels.sum())


@dataclass(frozen=True)
class ProbVolume:
    """Voxel-wise foreground probabilities in [0, 1]."""

    values: torch.Tensor

    def __post_init__(self):
        values = torch.as_tensor(self.values, dtype=torch.float64)
        if values.dim() != 3:
            raise InvalidArgumentError(f"probability volume must be 3-d, got {tuple(values.shape)}")
        detached = values.detach()
        if bool((detached < 0).any()) or bool((detached > 1).any()):
            raise InvalidArgumentError("probabilities must lie in [0, 1]")
        object.__setattr__(self, 'values', values)


def _check_pair(a, b):
    if a.dims != b.dims:
        raise InvalidArgumentError(f"mask dims differ: {a.dims} vs {b.dims}")
    if a.spacing != b.spacing:
        raise InvalidArgumentError(f"mask spacing differs: {a.spacing} vs {b.spacing}")


def dice(a, b):
    """2|A n B| / (|A| + |B|), counted in voxels."""
    _check_pair(a, b)
    total = a.count() + b.count()
    if total == 0:
        return 1.0
    overlap = int(np.logical_and(a.voxels, b.voxels).sum())
    return 2.0 * overlap / total


def boundary(m):
    """Boundary voxels (6-connectivity surface) as a boolean volume."""
    interior = ndimage.binary_erosion(m.voxels, structure=FACE_CONNECTIVITY, border_value=0)
    return m.voxels & ~interior


def boundary_points(m):
    """Boundary voxel centres in mm, shape (n, 3)."""
    return np.argwhere(boundary(m)).astype(np.float64) * np.asarray(m.spacing)


def nearest_rank(values, percentile=HD_PERCENTILE):
    """Nearest-rank percentile: sorted value at 1-based index ceil(p/100 * n)."""
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    n = ordered.size
    if n == 0:
        raise UndefinedMetricError("percentile of an empty set")
    rank = -(-percentile * n // 100)
    return float(ordered[max(rank, 1) - 1])


def directed_hd95(points_from, points_to):
    distances, _ = cKDTree(points_to).query(points_from)
    return nearest_rank(distances)


def hd95(a, b):
    """95th-percentile symmetric Hausdorff distance between boundaries (mm)."""
    _check_pair(a, b)
    if a.count() == 0 or b.count() == 0:
        raise UndefinedMetricError("HD95 is undefined when a mask is empty")
    points_a = boundary_points(a)
    points_b = boundary_points(b)
    return max(directed_hd95(points_a, points_b), directed_hd95(points_b, points_a))


def soft_dice(pred, target, eps=DICE_LOSS_EPS):
    """Per-sample soft Dice 2.sum(y.p) / (sum(y) + sum(p) + eps), shape (N,)."""
    pred = torch.as_tensor(pred, dtype=torch.float64)
    target = torch.as_tensor(target, dtype=torch.float64)
    if pred.shape != target.shape:
        raise InvalidArgumentError(
            f"prediction shape {tuple(pred.shape)} differs from target {tuple(target.shape)}"
        )
    if pred.dim() < 1 or pred.shape[0] < 1:
        raise InvalidArgumentError("dice loss needs a nonempty batch")
    dims = tuple(range(1, pred.dim()))
    intersection = (pred * target).sum(dim=dims)
    denominator = target.sum(dim=dims) + pred.sum(dim=dims) + eps
    return 2.0 * intersection / denominator


def dice_loss(pred, target, eps=DICE_LOSS_EPS):
    """
    -(1/N) sum_n soft_dice_n. ``pred`` and ``target`` are batches shaped
    (N, ...); sequences of ProbVolume / Mask3D are stacked first.
    """
    if isinstance(pred, (list, tuple)):
        pred = torch.stack([p.values if isinstance(p, ProbVolume) else torch.as_tensor(p) for p in pred])
    if isinstance(target, (list, tuple)):
        target = torch.stack([
            torch.as_tensor(t.voxels if isinstance(t, Mask3D) else t, dtype=torch.float64)
            for t in target
        ])
    return -soft_dice(pred, target, eps).mean()


def remove_small_components(m, min_volume_mm3):
    """Drop 26-connected components whose volume (mm^3) is below the threshold."""
    if min_volume_mm3 < 0:
        raise InvalidArgumentError(f"threshold must be nonnegative, got {min_volume_mm3}")
    labels, count = ndimage.label(m.voxels, structure=FULL_CONNECTIVITY)
    if count == 0:
        return Mask3D(m.voxels.copy(), m.spacing)
    sizes = np.bincount(labels.ravel())
    keep = sizes * m.voxel_volume >= min_volume_mm3
    keep[0] = False
    removed = int(count - keep[1:].sum())
    logger.debug(f"post-processing: {count} components, {removed} below {min_volume_mm3} mm^3")
    return Mask3D(keep[labels], m.spacing)
