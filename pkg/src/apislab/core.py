"""Shared domain types: rasters, boxes, instances, point sets, and the budget ledger."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DuplicatePoint, InvalidConstant, OutOfBox

DEFAULT_POINT_SECONDS = 0.9
DEFAULT_MASK_SECONDS = 79.2


@dataclass(frozen=True)
class ImageRaster:
    """An RGB image with channel values in [0, 1], row-major.

    ``pixels`` has shape (height, width, 3). Generated scenes quantize values
    to the 8-bit grid (k/255) so disk round-trips are bit-exact.
    """

    image_id: str
    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        if self.width < 8 or self.height < 8:
            raise ValueError(f"image must be at least 8x8, got {self.width}x{self.height}")
        if self.pixels.shape != (self.height, self.width, 3):
            raise ValueError(f"pixel array shape {self.pixels.shape} does not match size")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("channel values must lie in [0, 1]")


@dataclass(frozen=True, order=True)
class Box:
    """Axis-aligned box with inclusive integer pixel bounds."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        if not (0 <= self.x_min <= self.x_max and 0 <= self.y_min <= self.y_max):
            raise ValueError(f"invalid box bounds {self}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1

    @property
    def area(self) -> int:
        return self.width * self.height

    def contains(self, x: int, y: int) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max


@dataclass(frozen=True)
class InstanceRecord:
    """One annotated instance: identity, category, and its ground-truth box."""

    image_id: str
    instance_id: str
    category_id: int
    box: Box

    @property
    def key(self) -> tuple[str, str]:
        return (self.image_id, self.instance_id)


@dataclass(frozen=True)
class Dataset:
    """A split: images plus their instance records."""

    images: tuple[ImageRaster, ...]
    instances: tuple[InstanceRecord, ...]

    def __post_init__(self):
        by_id = {im.image_id: im for im in self.images}
        keys = set()
        for rec in self.instances:
            if rec.key in keys:
                raise ValueError(f"duplicate instance key {rec.key}")
            keys.add(rec.key)
            im = by_id.get(rec.image_id)
            if im is None:
                raise ValueError(f"instance {rec.key} references unknown image")
            if rec.box.x_max >= im.width or rec.box.y_max >= im.height:
                raise ValueError(f"instance {rec.key} box exceeds image bounds")

    @property
    def q_total(self) -> int:
        """Total instance count across all images."""
        return len(self.instances)

    def image(self, image_id: str) -> ImageRaster:
        for im in self.images:
            if im.image_id == image_id:
                return im
        raise KeyError(image_id)

    def instance(self, image_id: str, instance_id: str) -> InstanceRecord:
        for rec in self.instances:
            if rec.image_id == image_id and rec.instance_id == instance_id:
                return rec
        raise KeyError((image_id, instance_id))

    def instance_map(self) -> dict[tuple[str, str], InstanceRecord]:
        return {rec.key: rec for rec in self.instances}

    def image_map(self) -> dict[str, ImageRaster]:
        return {im.image_id: im for im in self.images}


@dataclass(frozen=True)
class PointAnnotation:
    """One labeled point: identity, pixel coordinates, binary label, and step."""

    image_id: str
    instance_id: str
    x: int
    y: int
    label: int
    step: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.step < 0:
            raise ValueError("step must be non-negative")

    @property
    def key(self) -> tuple[str, str]:
        return (self.image_id, self.instance_id)

    @property
    def pixel_key(self) -> tuple[str, str, int, int]:
        return (self.image_id, self.instance_id, self.x, self.y)


@dataclass(frozen=True)
class PointSet:
    """The growing ledger of labeled points up to (and including) ``step``."""

    points: tuple[PointAnnotation, ...]
    step: int

    def __post_init__(self):
        seen = set()
        for p in self.points:
            if p.pixel_key in seen:
                raise ValueError(f"duplicate point {p.pixel_key}")
            seen.add(p.pixel_key)

    def __len__(self) -> int:
        return len(self.points)

    def pixels_for(self, image_id: str, instance_id: str) -> set[tuple[int, int]]:
        return {(p.x, p.y) for p in self.points if p.image_id == image_id and p.instance_id == instance_id}

    def points_at_step(self, step: int) -> tuple[PointAnnotation, ...]:
        return tuple(p for p in self.points if p.step == step)


def empty_point_set() -> PointSet:
    return PointSet(points=(), step=-1)


def merge_point_set(
    previous: PointSet,
    new_points: list[PointAnnotation] | tuple[PointAnnotation, ...],
    dataset: Dataset | None = None,
) -> PointSet:
    """Union ``previous`` with one step's newly labeled points.

    An empty ``new_points`` list is a no-op: the previous set is returned with
    its step unchanged. When a dataset is supplied, each new point is checked
    against its instance's box (inclusive bounds).
    """
    if not new_points:
        return previous
    existing = {p.pixel_key for p in previous.points}
    if dataset is not None:
        inst_map = dataset.instance_map()
    for p in new_points:
        if p.pixel_key in existing:
            raise DuplicatePoint(f"point {p.pixel_key} already labeled")
        existing.add(p.pixel_key)
        if dataset is not None:
            rec = inst_map.get(p.key)
            if rec is None:
                raise OutOfBox(f"point references unknown instance {p.key}")
            if not rec.box.contains(p.x, p.y):
                raise OutOfBox(f"point ({p.x}, {p.y}) outside box of {p.key}")
    return PointSet(points=previous.points + tuple(new_points), step=previous.step + 1)


@dataclass
class BudgetLedger:
    """Annotation-seconds accounting at fixed per-point and per-mask costs."""

    t_point: float = DEFAULT_POINT_SECONDS
    t_mask: float = DEFAULT_MASK_SECONDS
    n_points: int = 0
    n_masks: int = 0

    @property
    def spent(self) -> float:
        return self.n_points * self.t_point + self.n_masks * self.t_mask

    def charge_point(self) -> None:
        self.n_points += 1

    def charge_mask(self) -> None:
        self.n_masks += 1


def budget_cost(
    n_points: int,
    n_masks: int,
    t_point: float = DEFAULT_POINT_SECONDS,
    t_mask: float = DEFAULT_MASK_SECONDS,
) -> float:
    """Total annotation seconds for the given counts."""
    if n_points < 0 or n_masks < 0:
        raise ValueError("counts must be non-negative")
    return n_points * t_point + n_masks * t_mask


def budget_equivalent_masks(
    n_points: int,
    t_point: float = DEFAULT_POINT_SECONDS,
    t_mask: float = DEFAULT_MASK_SECONDS,
) -> int:
    """How many full masks the point budget buys, rounded to the nearest count.

    Nearest-integer rounding matches the published equivalence of 860000
    points to 9773 masks (860000 * 0.9 / 79.2 = 9772.7...).
    """
    if n_points < 0:
        raise ValueError("n_points must be non-negative")
    if t_mask <= 0:
        raise InvalidConstant(f"t_mask must be positive, got {t_mask}")
    return int(np.floor(n_points * t_point / t_mask + 0.5))


@dataclass(frozen=True)
class ValidationIssue:
    kind: str  # "Duplicate" | "OutOfBox" | "UnknownInstance"
    detail: str


def validate_point_set(point_set: PointSet, dataset: Dataset) -> list[ValidationIssue]:
    """Collect every invariant violation; an empty report means the set is valid."""
    issues: list[ValidationIssue] = []
    inst_map = dataset.instance_map()
    seen: set[tuple[str, str, int, int]] = set()
    for p in point_set.points:
        if p.pixel_key in seen:
            issues.append(ValidationIssue("Duplicate", f"{p.pixel_key} labeled twice"))
        seen.add(p.pixel_key)
        rec = inst_map.get(p.key)
        if rec is None:
            issues.append(ValidationIssue("UnknownInstance", f"{p.key} not in dataset"))
        elif not rec.box.contains(p.x, p.y):
            issues.append(ValidationIssue("OutOfBox", f"({p.x}, {p.y}) outside box of {p.key}"))
    return issues


def write_point_set(point_set: PointSet, path) -> None:
    """Serialize one step's point set with a fixed field order for byte-stable output."""
    records = [
        {
            "image_id": p.image_id,
            "instance_id": p.instance_id,
            "x": p.x,
            "y": p.y,
            "label": p.label,
            "step": p.step,
        }
        for p in point_set.points
    ]
    with open(path, "w") as f:
        json.dump(records, f, indent=1)
        f.write("\n")


def read_point_set(path) -> PointSet:
    with open(path) as f:
        records = json.load(f)
    points = tuple(
        PointAnnotation(
            image_id=r["image_id"],
            instance_id=r["instance_id"],
            x=r["x"],
            y=r["y"],
            label=r["label"],
            step=r["step"],
        )
        for r in records
    )
    step = max((p.step for p in points), default=-1)
    return PointSet(points=points, step=step)
