"""The box-conditioned pixel classifier: handcrafted features, K_A logistic
"anchor" heads trained on bootstrap resamples, minibatch SGD on labeled points
(or dense masks), and committee prediction sets in three modes:

  A  one map per anchor head (K = K_A),
  M  heads of R independently trained replicas concatenated (K = R * K_A),
  S  heads evaluated on Gaussian-blurred input copies (K = len(scales) * K_A).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .core import Box, Dataset, ImageRaster, PointSet
from .errors import EmptySupervision, FormatViolation, ModeUnavailable

FEATURE_DIM = 9
CHECKPOINT_MAGIC = b"APIS"
CHECKPOINT_VERSION = 1

DEFAULT_NUM_HEADS = 4
DEFAULT_L2 = 1e-4
DEFAULT_REPLICAS = 3
DEFAULT_SCALES = (0.0, 1.0, 2.0)


@dataclass(frozen=True)
class ModelParams:
    """K_A weight vectors over the 9-dim feature space plus the L2 strength."""

    weights: np.ndarray  # (num_heads, FEATURE_DIM)
    l2: float = DEFAULT_L2

    def __post_init__(self):
        if self.weights.ndim != 2 or self.weights.shape[1] != FEATURE_DIM:
            raise ValueError(f"weights must be (K_A, {FEATURE_DIM}), got {self.weights.shape}")
        if not np.isfinite(self.weights).all():
            raise ValueError("weights must be finite")

    @property
    def num_heads(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class TrainSchedule:
    iterations: int
    lr0: float = 0.1
    decay_points: tuple[int, ...] = ()
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        if list(self.decay_points) != sorted(set(self.decay_points)):
            raise ValueError("decay points must be strictly increasing")
        if any(d >= self.iterations for d in self.decay_points) and self.iterations > 0:
            raise ValueError("decay points must precede the final iteration")


def standard_schedule(iterations: int, seed: int, lr0: float = 0.1) -> TrainSchedule:
    """lr decays x0.1 at 1/3 and 2/3 of the iteration count."""
    decays = tuple(sorted({max(1, iterations // 3), max(2, (2 * iterations) // 3)})) if iterations >= 3 else ()
    return TrainSchedule(iterations=iterations, lr0=lr0, decay_points=decays, seed=seed)


@dataclass(frozen=True)
class PredictionSet:
    """K probability maps for one instance over ``extent`` (usually the box)."""

    image_id: str
    instance_id: str
    extent: Box
    maps: np.ndarray  # (K, extent.height, extent.width), values in [0, 1]
    mode: str  # "A" | "M" | "S"

    @property
    def k(self) -> int:
        return self.maps.shape[0]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class FeatureCache:
    """Per-(image, box, blur) feature extraction with cached color references.

    The in/out reference colors are medians: the central patch covering 25% of
    the box area (half extent per side, rounded up) and a 2-pixel ring just
    outside the box, clipped to the image (whole-image median if fully clipped).
    """

    def __init__(self):
        self._blurred: dict[tuple[str, float], np.ndarray] = {}
        self._refs: dict[tuple[str, Box, float], tuple[np.ndarray, np.ndarray]] = {}
        self._grids: dict[tuple[str, Box, Box, float], np.ndarray] = {}

    def _pixels(self, image: ImageRaster, sigma: float) -> np.ndarray:
        key = (image.image_id, sigma)
        if key not in self._blurred:
            if sigma == 0:
                self._blurred[key] = image.pixels
            else:
                self._blurred[key] = ndimage.gaussian_filter(image.pixels, sigma=(sigma, sigma, 0))
        return self._blurred[key]

    def _color_refs(self, image: ImageRaster, box: Box, sigma: float) -> tuple[np.ndarray, np.ndarray]:
        key = (image.image_id, box, sigma)
        if key in self._refs:
            return self._refs[key]
        px = self._pixels(image, sigma)
        half_w = max(1, (box.width + 1) // 2)
        half_h = max(1, (box.height + 1) // 2)
        cx0 = box.x_min + (box.width - half_w) // 2
        cy0 = box.y_min + (box.height - half_h) // 2
        patch = px[cy0 : cy0 + half_h, cx0 : cx0 + half_w].reshape(-1, 3)
        c_in = np.median(patch, axis=0)

        x0, x1 = max(0, box.x_min - 2), min(image.width, box.x_max + 3)
        y0, y1 = max(0, box.y_min - 2), min(image.height, box.y_max + 3)
        ring = np.ones((y1 - y0, x1 - x0), dtype=bool)
        ring[box.y_min - y0 : box.y_max + 1 - y0, box.x_min - x0 : box.x_max + 1 - x0] = False
        ring_px = px[y0:y1, x0:x1][ring]
        if ring_px.size == 0:
            ring_px = px.reshape(-1, 3)
        c_out = np.median(ring_px.reshape(-1, 3), axis=0)
        self._refs[key] = (c_in, c_out)
        return c_in, c_out

    def features_at(
        self,
        image: ImageRaster,
        box: Box,
        xs: np.ndarray,
        ys: np.ndarray,
        sigma: float = 0.0,
    ) -> np.ndarray:
        """Feature rows for arbitrary pixels (which may lie outside the box)."""
        px = self._pixels(image, sigma)
        c_in, c_out = self._color_refs(image, box, sigma)
        cx = (box.x_min + box.x_max) / 2.0
        cy = (box.y_min + box.y_max) / 2.0
        u = (xs - cx) / box.width
        v = (ys - cy) / box.height
        colors = px[ys, xs]
        feats = np.empty((len(xs), FEATURE_DIM))
        feats[:, 0] = u
        feats[:, 1] = v
        feats[:, 2] = np.hypot(u, v)
        feats[:, 3:6] = colors
        feats[:, 6] = np.linalg.norm(colors - c_in, axis=1)
        feats[:, 7] = np.linalg.norm(colors - c_out, axis=1)
        feats[:, 8] = 1.0
        return feats

    def region_features(
        self, image: ImageRaster, box: Box, extent: Box, sigma: float = 0.0
    ) -> np.ndarray:
        """Features for every pixel of ``extent``, shape (H*W, FEATURE_DIM), row-major."""
        key = (image.image_id, box, extent, sigma)
        if key not in self._grids:
            ys, xs = np.mgrid[extent.y_min : extent.y_max + 1, extent.x_min : extent.x_max + 1]
            self._grids[key] = self.features_at(image, box, xs.ravel(), ys.ravel(), sigma)
        return self._grids[key]


def extract_features(image: ImageRaster, box: Box, x: int, y: int, cache: FeatureCache | None = None) -> np.ndarray:
    """Single-pixel feature vector; see FeatureCache for the reference colors."""
    cache = cache if cache is not None else FeatureCache()
    return cache.features_at(image, box, np.array([x]), np.array([y]))[0]


def forward_head(params: ModelParams, head: int, feature: np.ndarray) -> float:
    return float(_sigmoid(np.atleast_1d(feature @ params.weights[head]))[0])


def head_probabilities(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """(n, K_A) probabilities for a feature matrix."""
    return _sigmoid(features @ params.weights.T)


def loss_and_grad(params: ModelParams, features: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy over batch and heads plus L2 (bias excluded).

    Returns the exact analytic gradient with respect to every head's weights.
    """
    if features.shape[0] == 0:
        raise EmptySupervision("empty batch")
    n, k = features.shape[0], params.num_heads
    probs = head_probabilities(params, features)  # (n, K)
    y = labels[:, None]
    eps = 1e-300  # probabilities are strictly inside (0,1); guard only exact under/overflow
    bce = -(y * np.log(probs + eps) + (1 - y) * np.log(1 - probs + eps))
    reg = params.l2 * float(np.sum(params.weights[:, :-1] ** 2))
    loss = float(bce.mean()) + reg
    grad = ((probs - y).T @ features) / (n * k)  # (K, FEATURE_DIM)
    grad[:, :-1] += 2.0 * params.l2 * params.weights[:, :-1]
    return loss, grad


def init_params(seed: int, num_heads: int = DEFAULT_NUM_HEADS, l2: float = DEFAULT_L2) -> ModelParams:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xA115]))
    return ModelParams(weights=rng.normal(0.0, 0.01, size=(num_heads, FEATURE_DIM)), l2=l2)


@dataclass(frozen=True)
class SupervisionPool:
    """Flattened training samples: feature rows and binary labels."""

    features: np.ndarray
    labels: np.ndarray

    @property
    def size(self) -> int:
        return self.features.shape[0]


def build_supervision(
    dataset: Dataset,
    cache: FeatureCache,
    point_set: PointSet | None = None,
    masks: dict | None = None,
) -> SupervisionPool:
    """Assemble the pool: one sample per labeled point plus, for each
    mask-annotated instance, every in-box pixel labeled by the mask."""
    images = dataset.image_map()
    instances = dataset.instance_map()
    feats: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    if point_set is not None and len(point_set) > 0:
        by_instance: dict[tuple[str, str], list] = {}
        for p in point_set.points:
            by_instance.setdefault(p.key, []).append(p)
        for key, pts in by_instance.items():
            rec = instances[key]
            xs = np.array([p.x for p in pts])
            ys = np.array([p.y for p in pts])
            feats.append(cache.features_at(images[key[0]], rec.box, xs, ys))
            labels.append(np.array([p.label for p in pts], dtype=np.float64))
    if masks:
        for key, mask in masks.items():
            rec = instances[key]
            box = rec.box
            feats.append(cache.region_features(images[key[0]], box, box))
            labels.append(mask[box.y_min : box.y_max + 1, box.x_min : box.x_max + 1].ravel().astype(np.float64))
    if not feats:
        raise EmptySupervision("no labeled points or masks provided")
    return SupervisionPool(features=np.concatenate(feats), labels=np.concatenate(labels))


def train(
    initial: ModelParams,
    pool: SupervisionPool,
    schedule: TrainSchedule,
) -> ModelParams:
    """Minibatch SGD from ``initial`` (which is left unchanged).

    Each head trains on its own bootstrap resample (with replacement, ratio
    1.0) of the pool, drawn from a head-specific sub-seed; this is what makes
    the anchor committee disagree. Deterministic for fixed inputs.
    """
    if pool.size == 0:
        raise EmptySupervision("supervision pool is empty")
    if schedule.iterations == 0:
        return initial
    k = initial.num_heads
    n = pool.size
    weights = initial.weights.copy()
    head_rngs = [np.random.default_rng(np.random.SeedSequence([schedule.seed, 0xB007, h])) for h in range(k)]
    head_pools = []
    for h in range(k):
        idx = head_rngs[h].integers(0, n, size=n)
        head_pools.append((pool.features[idx], pool.labels[idx]))
    lr = schedule.lr0
    decays = set(schedule.decay_points)
    for it in range(schedule.iterations):
        if it in decays:
            lr *= 0.1
        for h in range(k):
            hf, hl = head_pools[h]
            bidx = head_rngs[h].integers(0, n, size=min(schedule.batch_size, n))
            bf, bl = hf[bidx], hl[bidx]
            p = _sigmoid(bf @ weights[h])
            g = ((p - bl) @ bf) / len(bl)
            g[:-1] += 2.0 * initial.l2 * weights[h, :-1]
            weights[h] -= lr * g
    if not np.isfinite(weights).all():
        raise FloatingPointError("training produced non-finite weights")
    return replace(initial, weights=weights)


def dilate_box(box: Box, width: int, height: int, frac: float = 0.25) -> Box:
    """Grow the box by ``frac`` of its extent per side, clipped to the image."""
    dx = int(round(frac * box.width))
    dy = int(round(frac * box.height))
    return Box(
        max(0, box.x_min - dx),
        max(0, box.y_min - dy),
        min(width - 1, box.x_max + dx),
        min(height - 1, box.y_max + dy),
    )


def predict_instance(
    params: ModelParams,
    image: ImageRaster,
    box: Box,
    mode: str = "A",
    cache: FeatureCache | None = None,
    replicas: list[ModelParams] | None = None,
    scales: tuple[float, ...] = DEFAULT_SCALES,
    extent: Box | None = None,
    image_id: str = "",
    instance_id: str = "",
) -> PredictionSet:
    """Committee probability maps over ``extent`` (default: the box)."""
    cache = cache if cache is not None else FeatureCache()
    extent = extent if extent is not None else box
    h, w = extent.height, extent.width

    def _maps(p: ModelParams, sigma: float) -> np.ndarray:
        feats = cache.region_features(image, box, extent, sigma)
        return head_probabilities(p, feats).T.reshape(p.num_heads, h, w)

    if mode == "A":
        maps = _maps(params, 0.0)
    elif mode == "M":
        if not replicas:
            raise ModeUnavailable("mode M requires trained replicas")
        maps = np.concatenate([_maps(r, 0.0) for r in replicas], axis=0)
    elif mode == "S":
        if not scales:
            raise ModeUnavailable("mode S requires a non-empty scale list")
        maps = np.concatenate([_maps(params, s) for s in scales], axis=0)
    else:
        raise ValueError(f"unknown prediction mode {mode!r}")
    return PredictionSet(
        image_id=image_id or image.image_id,
        instance_id=instance_id,
        extent=extent,
        maps=maps,
        mode=mode,
    )


def predicted_box(mean_map: np.ndarray, extent: Box, threshold: float = 0.5) -> Box | None:
    """Tight box (image coordinates) of pixels with mean probability >= threshold.

    Returns None when no pixel qualifies (the instance is undetected).
    """
    ys, xs = np.nonzero(mean_map >= threshold)
    if len(xs) == 0:
        return None
    return Box(
        extent.x_min + int(xs.min()),
        extent.y_min + int(ys.min()),
        extent.x_min + int(xs.max()),
        extent.y_min + int(ys.max()),
    )


def save_checkpoint(params: ModelParams, path: str, meta: dict | None = None) -> None:
    """Binary checkpoint: magic, version u32, K_A u32, dim u32, f64-LE weights."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<III", CHECKPOINT_VERSION, params.num_heads, FEATURE_DIM))
        f.write(params.weights.astype("<f8").tobytes())
    if meta is not None:
        with open(path + ".json", "w") as f:
            json.dump(meta, f, indent=1, sort_keys=True)
            f.write("\n")


def load_checkpoint(path: str) -> ModelParams:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatViolation(f"{path}: bad magic")
    version, k, dim = struct.unpack("<III", raw[4:16])
    if version != CHECKPOINT_VERSION:
        raise FormatViolation(f"{path}: unsupported version {version}")
    if dim != FEATURE_DIM:
        raise FormatViolation(f"{path}: feature dim {dim} != {FEATURE_DIM}")
    expected = 16 + k * dim * 8
    if len(raw) != expected:
        raise FormatViolation(f"{path}: expected {expected} bytes, got {len(raw)}")
    weights = np.frombuffer(raw[16:], dtype="<f8").reshape(k, dim).copy()
    l2 = DEFAULT_L2
    sidecar = path + ".json"
    if os.path.exists(sidecar):
        with open(sidecar) as f:
            meta = json.load(f)
        l2 = meta.get("l2", DEFAULT_L2)
    return ModelParams(weights=weights, l2=l2)
