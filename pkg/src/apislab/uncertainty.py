"""Acquisition math: entropy of the averaged prediction and committee variance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, EmptyPredictionSet, InsufficientPredictions
from .segmodel import PredictionSet

LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class UncertaintyMap:
    values: np.ndarray  # grid over the prediction extent
    metric: str  # "entropy" | "variance"
    source: PredictionSet


def entropy(p) -> float | np.ndarray:
    """Binary Shannon entropy in nats, with 0*ln(0) taken as 0."""
    arr = np.asarray(p, dtype=np.float64)
    if (arr < 0).any() or (arr > 1).any():
        raise DomainError("probability outside [0, 1]")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = -np.where(arr > 0, arr * np.log(arr), 0.0) - np.where(arr < 1, (1 - arr) * np.log(1 - arr), 0.0)
    out = np.where((arr == 0) | (arr == 1), 0.0, out)
    return float(out) if np.isscalar(p) else out


def mean_map(ps: PredictionSet) -> np.ndarray:
    """Element-wise arithmetic mean of the K maps."""
    if ps.k == 0:
        raise EmptyPredictionSet("prediction set has K = 0 maps")
    return ps.maps.mean(axis=0)


def entropy_map(ps: PredictionSet) -> UncertaintyMap:
    """Entropy applied pointwise to the mean map."""
    return UncertaintyMap(values=entropy(mean_map(ps)), metric="entropy", source=ps)


def variance_map(ps: PredictionSet) -> UncertaintyMap:
    """Element-wise population variance (divide by K) across the committee."""
    if ps.k < 2:
        raise InsufficientPredictions(f"variance requires K >= 2, got K = {ps.k}")
    return UncertaintyMap(values=ps.maps.var(axis=0), metric="variance", source=ps)


def dump_map_pgm(umap: UncertaintyMap, path: str) -> None:
    """Debug dump: 8-bit PGM scaled by the metric's maximum (ln 2 or 0.25)."""
    scale = LN2 if umap.metric == "entropy" else 0.25
    data = np.round(np.clip(umap.values / scale, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(data.tobytes())
