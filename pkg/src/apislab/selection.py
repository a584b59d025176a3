"""Point selection (argmax of acquisition scores over the in-box candidate set),
diagnostic error-based selection, GIoU detection loss, and the AFIS image- and
instance-level selectors with budget accounting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Box
from .errors import EmptyDomain
from .segmodel import PredictionSet
from .uncertainty import mean_map

POINT_STRATEGIES = ("random", "entropy", "variance", "lowest-entropy", "max-error", "least-error")
AFIS_STRATEGIES = ("afis-image", "afis-instance")
AFIS_METRICS = ("mean-entropy", "min-det-loss", "max-det-loss", "random")
ORACLE_ASSISTED = ("max-error", "least-error")


@dataclass(frozen=True)
class SelectionDomain:
    """Candidate pixels for one instance: in-box pixels minus labeled ones.

    ``allowed`` is a boolean grid over the box region (row-major).
    """

    box: Box
    allowed: np.ndarray

    @classmethod
    def build(cls, box: Box, labeled: set[tuple[int, int]]) -> "SelectionDomain":
        allowed = np.ones((box.height, box.width), dtype=bool)
        for (x, y) in labeled:
            if box.contains(x, y):
                allowed[y - box.y_min, x - box.x_min] = False
        return cls(box=box, allowed=allowed)

    @property
    def size(self) -> int:
        return int(self.allowed.sum())


def _pick(scores: np.ndarray, domain: SelectionDomain, maximize: bool) -> tuple[int, int]:
    """Arg-extreme over the domain with smallest-row-major-index tie-break."""
    if domain.size == 0:
        raise EmptyDomain("every box pixel is already labeled")
    masked = np.where(domain.allowed, scores, -np.inf if maximize else np.inf)
    flat = int(np.argmax(masked) if maximize else np.argmin(masked))
    y, x = divmod(flat, domain.box.width)
    return (domain.box.x_min + x, domain.box.y_min + y)


def _box_view(ps: PredictionSet, box: Box) -> np.ndarray:
    """Mean map restricted to the box when the set covers a larger extent."""
    m = mean_map(ps)
    e = ps.extent
    return m[box.y_min - e.y_min : box.y_max + 1 - e.y_min, box.x_min - e.x_min : box.x_max + 1 - e.x_min]


def select_point(
    strategy: str,
    ps: PredictionSet | None,
    domain: SelectionDomain,
    rng: np.random.Generator,
) -> tuple[int, int]:
    """One pixel per instance, following the K-edge rules: an unpredicted
    instance (K = 0) falls back to a uniform random draw, and variance with a
    single prediction (K = 1) falls back to entropy.

    Entropy selection is computed as the argmin of |mean - 0.5| (the exact
    argmax of the binary entropy, which is strictly decreasing in |p - 0.5|);
    lowest-entropy is the corresponding argmax. Ties break to the smallest
    row-major index.
    """
    if domain.size == 0:
        raise EmptyDomain("every box pixel is already labeled")
    k = 0 if ps is None else ps.k
    if strategy == "random" or k == 0:
        ys, xs = np.nonzero(domain.allowed)
        i = int(rng.integers(len(xs)))
        return (domain.box.x_min + int(xs[i]), domain.box.y_min + int(ys[i]))
    if strategy == "variance" and k == 1:
        strategy = "entropy"
    mm = _box_view(ps, domain.box)
    if strategy == "entropy":
        return _pick(np.abs(mm - 0.5), domain, maximize=False)
    if strategy == "lowest-entropy":
        return _pick(np.abs(mm - 0.5), domain, maximize=True)
    if strategy == "variance":
        e = ps.extent
        b = domain.box
        sub = ps.maps[:, b.y_min - e.y_min : b.y_max + 1 - e.y_min, b.x_min - e.x_min : b.x_max + 1 - e.x_min]
        return _pick(sub.var(axis=0), domain, maximize=True)
    raise ValueError(f"unknown strategy {strategy!r}")


def select_point_by_error(
    mode: str,
    ps: PredictionSet,
    gt_mask: np.ndarray,
    domain: SelectionDomain,
) -> tuple[int, int]:
    """Diagnostic selection by |mean prediction - ground truth| (max or min).

    Requires ground truth; runs using it are flagged oracle-assisted.
    """
    if mode not in ("max", "min"):
        raise ValueError(f"error mode must be 'max' or 'min', got {mode!r}")
    b = domain.box
    mm = _box_view(ps, b)
    gt = gt_mask[b.y_min : b.y_max + 1, b.x_min : b.x_max + 1].astype(np.float64)
    return _pick(np.abs(mm - gt), domain, maximize=(mode == "max"))


# ---------------------------------------------------------------------------
# GIoU and AFIS selection
# ---------------------------------------------------------------------------

UNDETECTED_LOSS = 2.0


def giou(a: Box, b: Box) -> float:
    """Generalized IoU with discrete (inclusive-bound) pixel areas."""
    ix0, iy0 = max(a.x_min, b.x_min), max(a.y_min, b.y_min)
    ix1, iy1 = min(a.x_max, b.x_max), min(a.y_max, b.y_max)
    inter = max(0, ix1 - ix0 + 1) * max(0, iy1 - iy0 + 1)
    union = a.area + b.area - inter
    iou = inter / union
    c = Box(min(a.x_min, b.x_min), min(a.y_min, b.y_min), max(a.x_max, b.x_max), max(a.y_max, b.y_max))
    return iou - (c.area - union) / c.area


def detection_loss(pred: Box | None, gt: Box) -> float:
    """1 - GIoU, with undetected instances assigned the supremum loss 2.0."""
    if pred is None:
        return UNDETECTED_LOSS
    return 1.0 - giou(pred, gt)


def image_scores(instance_scores: dict[tuple[str, str], float]) -> dict[str, float]:
    """Mean of each image's instance scores."""
    sums: dict[str, list[float]] = {}
    for (image_id, _), s in instance_scores.items():
        sums.setdefault(image_id, []).append(s)
    return {im: float(np.mean(v)) for im, v in sums.items()}


def afis_select(
    instance_scores: dict[tuple[str, str], float],
    level: str,
    metric: str,
    budget_seconds: float,
    t_mask: float,
    rng: np.random.Generator,
    exclude: set[tuple[str, str]] | None = None,
) -> list[tuple[str, str]]:
    """Greedy budgeted selection of instances to mask-annotate.

    Instance level adds candidates in score order until the next would exceed
    the budget. Image level adds whole images atomically, skipping (not
    stopping at) images whose full cost would overflow the remaining budget.
    Ordering: mean-entropy descending, min-det-loss ascending, max-det-loss
    descending, random shuffled.
    """
    exclude = exclude or set()
    candidates = {k: v for k, v in instance_scores.items() if k not in exclude}

    def _order(keys, scores):
        keys = sorted(keys)  # deterministic base order before scoring
        if metric == "random":
            keys = list(keys)
            rng.shuffle(keys)
            return keys
        reverse = metric in ("mean-entropy", "max-det-loss")
        return sorted(keys, key=lambda k: (-scores[k] if reverse else scores[k], k))

    picked: list[tuple[str, str]] = []
    # integer mask capacity avoids drift from repeated float subtraction
    remaining = int(np.floor(budget_seconds / t_mask + 1e-9))
    if level == "instance":
        for key in _order(candidates.keys(), candidates):
            if remaining >= 1:
                picked.append(key)
                remaining -= 1
            else:
                break
    elif level == "image":
        by_image: dict[str, list[tuple[str, str]]] = {}
        for key in candidates:
            by_image.setdefault(key[0], []).append(key)
        im_scores = image_scores(candidates)
        for image_id in _order(by_image.keys(), im_scores):
            cost = len(by_image[image_id])
            if cost <= remaining:
                picked.extend(sorted(by_image[image_id]))
                remaining -= cost
    else:
        raise ValueError(f"level must be 'image' or 'instance', got {level!r}")
    return picked


def select_instances_under_budget(
    mode: str,
    budget: int,
    instances: list[tuple[str, str]],
    scores: dict[tuple[str, str], float] | None,
    rng: np.random.Generator,
) -> list[tuple[str, str]]:
    """The subset of instances receiving one point this step when the per-step
    point budget is smaller than the instance pool."""
    if budget >= len(instances):
        return list(instances)
    if mode == "random":
        idx = rng.choice(len(instances), size=budget, replace=False)
        return [instances[i] for i in sorted(idx)]
    if mode == "min_det_loss":
        ordered = sorted(instances, key=lambda k: (scores[k], k))
        return ordered[:budget]
    raise ValueError(f"unknown subset mode {mode!r}")
