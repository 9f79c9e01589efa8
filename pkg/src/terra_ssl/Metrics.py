"""
Evaluation metrics on binary masks: IoU, boundary IoU and their mean (Score).
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import ndimage

from .Errors import ConfigurationError, ContractError

logger = logging.getLogger(__name__)

STRUCTURE_THRESHOLD_M = 1.0


def _as_binary(mask, what):
    mask = np.asarray(mask)
    if mask.dtype != bool:
        if not np.isin(mask, (0, 1)).all():
            raise ContractError(f"{what} must be a binary mask.")
        mask = mask.astype(bool)
    return mask


def iou(pred, gt):
    """
    Intersection over union of two binary masks. Two empty masks have an IoU of 1.

    :param pred: predicted mask.
    :param gt: ground truth mask of the same shape.
    """
    pred = _as_binary(pred, "prediction")
    gt = _as_binary(gt, "ground truth")
    if pred.shape != gt.shape:
        raise ContractError(f"mask shapes {pred.shape} and {gt.shape} differ.")

    union = np.logical_or(pred, gt).sum()
    if union == 0:
        logger.debug("IoU of two empty masks set to 1.")
        return 1.0
    return float(np.logical_and(pred, gt).sum() / union)


def disk(radius):
    "Structuring element {(i, j) : i**2 + j**2 <= radius**2}."
    r = int(radius)
    i, j = np.mgrid[-r:r + 1, -r:r + 1]
    return i ** 2 + j ** 2 <= radius ** 2


def boundary_band(mask, d):
    """
    Pixels of the mask within `d` pixels of its edge: the mask minus its erosion by a disk of radius `d`. Pixels outside the image count as background.
    """
    mask = _as_binary(mask, "mask")
    return mask & ~ndimage.binary_erosion(mask, structure=disk(d), border_value=0)


def boundary_iou(pred, gt, d=2):
    """
    IoU of the boundary bands of thickness `d` of two masks.

    :param pred: predicted mask.
    :param gt: ground truth mask.
    :param d: band thickness in pixels (>= 1, default: 2).
    """
    if d < 1:
        raise ConfigurationError(f"boundary thickness must be >= 1, got {d}.")
    return iou(boundary_band(pred, d), boundary_band(gt, d))


def score(iou_value, biou_value):
    "Mean of IoU and boundary IoU."
    for value in (iou_value, biou_value):
        if not 0.0 <= value <= 1.0:
            raise ContractError(f"metric values must be in [0, 1], got {value}.")
    return (iou_value + biou_value) / 2.0


def structure_removal_masks(dsm, dtm, prediction, threshold=STRUCTURE_THRESHOLD_M):
    """
    Turns a terrain reconstruction into a segmentation: pixels where the prediction lies more than `threshold` meters below the DSM are "removed structures". The reference mask thresholds the true nDSM the same way.

    All inputs in meters.

    :return: (predicted mask, reference mask).
    """
    dsm, dtm, prediction = (np.asarray(a, dtype=np.float64) for a in (dsm, dtm, prediction))
    if not dsm.shape == dtm.shape == prediction.shape:
        raise ContractError("DSM, DTM and prediction must have the same shape.")
    return np.abs(dsm - prediction) > threshold, np.abs(dsm - dtm) > threshold


@dataclass
class MetricsReport:
    """
    Per-tile and aggregate metrics of an evaluation.

    :param tiles: one row per tile (tile_id, iou, biou, score, plus any extra column such as the target kind).
    :param split: evaluated split.
    """
    tiles: pd.DataFrame
    split: str = 'test'
    extra: dict = field(default_factory=dict)

    def aggregate(self, target=None):
        "Mean of each metric over tiles, optionally restricted to one target kind ('noisy' or 'clean')."
        df = self.tiles if target is None else self.tiles[self.tiles['target'] == target]
        if df.empty:
            raise ConfigurationError(f"no tile scored against {target!r} targets.")
        return {m: float(df[m].mean()) for m in ('iou', 'biou', 'score')}

    @property
    def targets(self):
        return sorted(self.tiles['target'].unique())

    def summary(self):
        "Aggregate table: one row per target kind."
        rows = []
        for target in self.targets:
            rows.append({'split': self.split, 'target': target, **self.aggregate(target), 'tiles': int((self.tiles['target'] == target).sum())})
        return pd.DataFrame(rows)

    def save(self, path):
        "Writes the per-tile table as tab-separated text."
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.tiles.to_csv(path, sep='\t', index=False, float_format='%.6f')


def score_tiles(predictions, targets, tile_ids, d=2, target='clean'):
    """
    IoU, boundary IoU and Score of each tile.

    :param predictions: iterable of predicted binary masks.
    :param targets: iterable of reference masks.
    :param tile_ids: identifiers of the tiles.
    :param d: boundary thickness.
    :param target: label of the reference kind stored in the 'target' column.
    """
    rows = []
    for tile_id, pred, gt in zip(tile_ids, predictions, targets):
        i = iou(pred, gt)
        b = boundary_iou(pred, gt, d)
        rows.append({'tile_id': tile_id, 'target': target, 'iou': i, 'biou': b, 'score': score(i, b)})
    return pd.DataFrame(rows, columns=['tile_id', 'target', 'iou', 'biou', 'score'])
