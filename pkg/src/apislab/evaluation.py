"""Measurement: mask IoU, identity-matched mAP with size buckets, point
accuracy, misclassification ratios, and boundary-distance statistics.

The mAP here averages, over IoU thresholds 0.50..0.95, the fraction of
identity-matched instances exceeding the threshold (boxes and identity are
given to the model), so it is not comparable to detector mAP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import Dataset, PointAnnotation, PointSet
from .errors import EmptyMask, EmptyPointSet, ExtentMismatch
from .segmodel import FeatureCache, ModelParams, head_probabilities, predict_instance
from .uncertainty import mean_map

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))
SMALL_MAX_AREA = 64  # exclusive upper bound for "small"
MEDIUM_MAX_AREA = 256  # inclusive upper bound for "medium"


def mask_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    """Intersection over union of two boolean masks; 1.0 when both are empty."""
    if pred.shape != gt.shape:
        raise ExtentMismatch(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    union = int(np.logical_or(pred, gt).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(pred, gt).sum()) / union


def size_bucket(area: int) -> str:
    if area < SMALL_MAX_AREA:
        return "small"
    if area <= MEDIUM_MAX_AREA:
        return "medium"
    return "large"


@dataclass(frozen=True)
class MapReport:
    map: float
    mean_iou: float
    per_threshold: dict[float, float]
    ap_small: float
    ap_medium: float
    ap_large: float
    instance_ious: dict[tuple[str, str], float]


def _ap(ious: list[float]) -> float:
    """Mean over thresholds of the fraction of instances at or above it."""
    if not ious:
        return 0.0
    arr = np.asarray(ious)
    return float(np.mean([(arr >= t).mean() for t in IOU_THRESHOLDS]))


def predicted_mask(
    params: ModelParams, dataset: Dataset, key: tuple[str, str], cache: FeatureCache
) -> np.ndarray:
    """Thresholded (>= 0.5, ties to foreground) mean mode-A map inside the GT
    box, zero outside, as a full-image boolean mask."""
    rec = dataset.instance_map()[key]
    image = dataset.image_map()[key[0]]
    ps = predict_instance(params, image, rec.box, mode="A", cache=cache, instance_id=key[1])
    mask = np.zeros((image.height, image.width), dtype=bool)
    mask[rec.box.y_min : rec.box.y_max + 1, rec.box.x_min : rec.box.x_max + 1] = mean_map(ps) >= 0.5
    return mask


def dataset_map(
    params: ModelParams, dataset: Dataset, truths: dict, cache: FeatureCache | None = None
) -> MapReport:
    cache = cache if cache is not None else FeatureCache()
    ious: dict[tuple[str, str], float] = {}
    buckets: dict[str, list[float]] = {"small": [], "medium": [], "large": []}
    for rec in dataset.instances:
        gt = truths[rec.key]
        iou = mask_iou(predicted_mask(params, dataset, rec.key, cache), gt)
        ious[rec.key] = iou
        buckets[size_bucket(int(gt.sum()))].append(iou)
    all_ious = list(ious.values())
    per_threshold = {float(t): float((np.asarray(all_ious) >= t).mean()) for t in IOU_THRESHOLDS}
    return MapReport(
        map=_ap(all_ious),
        mean_iou=float(np.mean(all_ious)),
        per_threshold=per_threshold,
        ap_small=_ap(buckets["small"]),
        ap_medium=_ap(buckets["medium"]),
        ap_large=_ap(buckets["large"]),
        instance_ious=ious,
    )


def _point_predictions(
    params: ModelParams, dataset: Dataset, points, cache: FeatureCache
) -> np.ndarray:
    """Thresholded (>= 0.5 -> 1) mean head probability for each point."""
    images = dataset.image_map()
    instances = dataset.instance_map()
    preds = np.empty(len(points), dtype=np.int64)
    for i, p in enumerate(points):
        feats = cache.features_at(images[p.image_id], instances[p.key].box, np.array([p.x]), np.array([p.y]))
        preds[i] = 1 if head_probabilities(params, feats).mean() >= 0.5 else 0
    return preds


def point_accuracy(
    params: ModelParams, dataset: Dataset, point_set: PointSet, cache: FeatureCache | None = None
) -> float:
    """Fraction of stored labels the model reproduces at threshold 0.5."""
    if len(point_set) == 0:
        raise EmptyPointSet("point set is empty")
    cache = cache if cache is not None else FeatureCache()
    preds = _point_predictions(params, dataset, point_set.points, cache)
    labels = np.array([p.label for p in point_set.points])
    return float((preds == labels).mean())


def misclassification_ratio(
    prev_params: ModelParams,
    dataset: Dataset,
    new_points: list[PointAnnotation] | tuple[PointAnnotation, ...],
    cache: FeatureCache | None = None,
) -> float:
    """Fraction of a step's freshly selected points the pre-update model got wrong."""
    if not new_points:
        return 0.0
    cache = cache if cache is not None else FeatureCache()
    preds = _point_predictions(prev_params, dataset, new_points, cache)
    labels = np.array([p.label for p in new_points])
    return float((preds != labels).mean())


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with at least one non-mask 4-neighbor (borders count as non-mask)."""
    if not mask.any():
        raise EmptyMask("visible mask is empty")
    padded = np.pad(mask, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return mask & ~interior


def boundary_distance_map(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from each pixel center to the nearest boundary
    pixel center of the mask."""
    boundary = boundary_pixels(mask)
    return ndimage.distance_transform_edt(~boundary)


def boundary_distance_stats(
    points, truths: dict
) -> tuple[float, list[float]]:
    """Mean (and per-point list of) distances to the nearest mask boundary."""
    dist_maps: dict[tuple[str, str], np.ndarray] = {}
    distances = []
    for p in points:
        if p.key not in dist_maps:
            dist_maps[p.key] = boundary_distance_map(truths[p.key])
        distances.append(float(dist_maps[p.key][p.y, p.x]))
    mean = float(np.mean(distances)) if distances else 0.0
    return mean, distances
