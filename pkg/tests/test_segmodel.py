import numpy as np
import pytest

from apislab import segmodel
from apislab.core import Box
from apislab.errors import EmptySupervision, FormatViolation, ModeUnavailable
from apislab.segmodel import (
    FEATURE_DIM,
    FeatureCache,
    ModelParams,
    TrainSchedule,
    build_supervision,
    dilate_box,
    forward_head,
    init_params,
    loss_and_grad,
    predict_instance,
    predicted_box,
    train,
)
from apislab.synthgen import generate_scene


@pytest.fixture(scope="module")
def scene():
    return generate_scene(11)


class TestFeatures:
    def test_center_pixel(self, scene):
        rec = scene.records[0]
        b = rec.box
        # exact center only exists for odd extents; use a centered odd sub-box
        bb = Box(b.x_min, b.y_min, b.x_min + (b.width - 1) // 2 * 2, b.y_min + (b.height - 1) // 2 * 2)
        cx = (bb.x_min + bb.x_max) // 2
        cy = (bb.y_min + bb.y_max) // 2
        f = segmodel.extract_features(scene.image, bb, cx, cy)
        assert f[0] == 0.0 and f[1] == 0.0 and f[2] == 0.0
        assert f[8] == 1.0

    def test_corner_pixel(self, scene):
        rec = scene.records[0]
        b = rec.box
        f = segmodel.extract_features(scene.image, b, b.x_max, b.y_max)
        assert f[0] == pytest.approx((b.width - 1) / (2 * b.width))
        assert f[1] == pytest.approx((b.height - 1) / (2 * b.height))

    def test_bounds(self, scene):
        cache = FeatureCache()
        for rec in scene.records:
            feats = cache.region_features(scene.image, rec.box, rec.box)
            assert np.all(np.abs(feats[:, 0]) <= 0.5)
            assert np.all(np.abs(feats[:, 1]) <= 0.5)
            assert np.all(feats[:, 2] <= np.sqrt(0.5) + 1e-12)
            assert np.all((feats[:, 3:6] >= 0) & (feats[:, 3:6] <= 1))
            assert np.all((feats[:, 6:8] >= 0) & (feats[:, 6:8] <= np.sqrt(3)))
            assert np.all(feats[:, 8] == 1.0)

    def test_on_object_color_separation(self):
        # On unoccluded, uniformly colored shapes the in-patch color reference
        # should be closer than the out-ring reference for most object pixels.
        cache = FeatureCache()
        on_obj = closer = 0
        for seed in range(1000):
            scene = generate_scene(seed)
            if len(scene.records) != 1:
                continue  # only unoccluded single-instance scenes
            rec = scene.records[0]
            mask = scene.truth.masks[rec.key]
            b = rec.box
            feats = cache.region_features(scene.image, b, b)
            sub = mask[b.y_min : b.y_max + 1, b.x_min : b.x_max + 1].ravel()
            on = feats[sub]
            on_obj += len(on)
            closer += int((on[:, 6] < on[:, 7]).sum())
        assert on_obj > 0
        assert closer / on_obj >= 0.95


class TestForward:
    def test_zero_weights(self):
        p = ModelParams(weights=np.zeros((4, FEATURE_DIM)))
        f = np.linspace(-0.5, 1.0, FEATURE_DIM)
        assert forward_head(p, 0, f) == 0.5

    def test_bias_saturation(self):
        w = np.zeros((1, FEATURE_DIM))
        w[0, -1] = 10.0
        p = ModelParams(weights=w)
        f = np.zeros(FEATURE_DIM)
        f[-1] = 1.0
        assert forward_head(p, 0, f) > 0.9999

    def test_hand_set_logistic(self):
        w = np.zeros((1, FEATURE_DIM))
        w[0, 0] = 1.0
        p = ModelParams(weights=w)
        f = np.zeros(FEATURE_DIM)
        f[0] = 0.25
        assert forward_head(p, 0, f) == pytest.approx(0.5621765, abs=1e-6)


class TestLoss:
    def test_zero_weights_ln2(self, rng):
        p = ModelParams(weights=np.zeros((4, FEATURE_DIM)), l2=0.0)
        feats = rng.uniform(-0.5, 1.0, size=(10, FEATURE_DIM))
        labels = rng.integers(0, 2, size=10).astype(np.float64)
        loss, _ = loss_and_grad(p, feats, labels)
        assert loss == pytest.approx(np.log(2.0), abs=1e-12)

    def test_single_point_bce(self):
        # one head producing 0.9 for a positive sample: loss = -ln 0.9
        w = np.zeros((1, FEATURE_DIM))
        w[0, -1] = np.log(9.0)  # sigmoid = 0.9
        p = ModelParams(weights=w, l2=0.0)
        f = np.zeros((1, FEATURE_DIM))
        f[0, -1] = 1.0
        loss, _ = loss_and_grad(p, f, np.array([1.0]))
        assert loss == pytest.approx(0.105361, abs=1e-6)

    def test_gradient_vs_finite_differences(self, rng):
        h = 1e-6
        worst = 0.0
        for _ in range(100):
            k = int(rng.integers(1, 5))
            n = int(rng.integers(1, 20))
            p = ModelParams(weights=rng.normal(0, 1.0, size=(k, FEATURE_DIM)), l2=1e-4)
            feats = rng.uniform(-0.5, 1.5, size=(n, FEATURE_DIM))
            labels = rng.integers(0, 2, size=n).astype(np.float64)
            _, grad = loss_and_grad(p, feats, labels)
            num = np.zeros_like(grad)
            for i in range(k):
                for j in range(FEATURE_DIM):
                    wp = p.weights.copy()
                    wm = p.weights.copy()
                    wp[i, j] += h
                    wm[i, j] -= h
                    lp, _ = loss_and_grad(ModelParams(weights=wp, l2=p.l2), feats, labels)
                    lm, _ = loss_and_grad(ModelParams(weights=wm, l2=p.l2), feats, labels)
                    num[i, j] = (lp - lm) / (2 * h)
            denom = np.maximum(np.abs(grad), np.abs(num))
            denom[denom < 1e-8] = 1.0
            worst = max(worst, float(np.max(np.abs(grad - num) / denom)))
        assert worst < 1e-4

    def test_empty_batch(self):
        p = init_params(0)
        with pytest.raises(EmptySupervision):
            loss_and_grad(p, np.empty((0, FEATURE_DIM)), np.empty(0))


class TestTrain:
    def _separable_pool(self, rng, n=200):
        feats = rng.uniform(-0.5, 0.5, size=(n, FEATURE_DIM))
        feats[:, -1] = 1.0
        labels = (feats[:, 0] > 0).astype(np.float64)
        return segmodel.SupervisionPool(features=feats, labels=labels)

    def test_zero_iterations_identity(self, rng):
        p = init_params(0)
        pool = self._separable_pool(rng)
        out = train(p, pool, TrainSchedule(iterations=0))
        assert out is p

    def test_converges_on_separable_data(self, rng):
        p = init_params(0)
        pool = self._separable_pool(rng)
        sched = TrainSchedule(iterations=1000, lr0=1.0, seed=0)
        out = train(p, pool, sched)
        loss, _ = loss_and_grad(out, pool.features, pool.labels)
        assert loss < 0.5 * np.log(2.0)
        probs = segmodel.head_probabilities(out, pool.features).mean(axis=1)
        acc = float(((probs >= 0.5) == (pool.labels == 1.0)).mean())
        assert acc >= 0.95

    def test_deterministic_and_pure(self, rng):
        p = init_params(3)
        before = p.weights.copy()
        pool = self._separable_pool(rng)
        sched = TrainSchedule(iterations=200, seed=5)
        a = train(p, pool, sched)
        b = train(p, pool, sched)
        assert np.array_equal(a.weights, b.weights)
        assert np.array_equal(p.weights, before)

    def test_bootstrap_head_diversity(self, rng):
        p = init_params(0)
        pool = self._separable_pool(rng, n=40)
        out = train(p, pool, TrainSchedule(iterations=500, seed=0))
        for i in range(out.num_heads):
            for j in range(i + 1, out.num_heads):
                assert not np.array_equal(out.weights[i], out.weights[j])

    def test_probabilities_strictly_inside_unit_interval(self, rng, scene):
        rec = scene.records[0]
        cache = FeatureCache()
        p = init_params(1)
        ps = predict_instance(p, scene.image, rec.box, cache=cache)
        assert np.all(ps.maps > 0.0) and np.all(ps.maps < 1.0)
        assert np.isfinite(ps.maps).all()


class TestPredict:
    def test_mode_counts(self, scene):
        rec = scene.records[0]
        p = init_params(0)
        cache = FeatureCache()
        assert predict_instance(p, scene.image, rec.box, mode="A", cache=cache).k == 4
        reps = [init_params(s) for s in range(3)]
        assert predict_instance(p, scene.image, rec.box, mode="M", cache=cache, replicas=reps).k == 12
        assert predict_instance(p, scene.image, rec.box, mode="S", cache=cache, scales=(0.0, 1.0, 2.0)).k == 12

    def test_mode_s_zero_blur_equals_mode_a(self, scene):
        rec = scene.records[0]
        p = init_params(0)
        cache = FeatureCache()
        a = predict_instance(p, scene.image, rec.box, mode="A", cache=cache)
        s = predict_instance(p, scene.image, rec.box, mode="S", cache=cache, scales=(0.0,))
        assert np.array_equal(a.maps, s.maps)

    def test_mode_m_requires_replicas(self, scene):
        rec = scene.records[0]
        with pytest.raises(ModeUnavailable):
            predict_instance(init_params(0), scene.image, rec.box, mode="M")


class TestPredictedBox:
    def test_exact_rectangle(self):
        extent = Box(10, 10, 19, 19)
        m = np.zeros((10, 10))
        m[2:5, 3:7] = 1.0
        assert predicted_box(m, extent) == Box(13, 12, 16, 14)

    def test_undetected(self):
        assert predicted_box(np.full((5, 5), 0.4), Box(0, 0, 4, 4)) is None

    def test_two_blobs_joint_box(self):
        extent = Box(0, 0, 9, 9)
        m = np.zeros((10, 10))
        m[1, 1] = 0.9
        m[8, 7] = 0.8
        # brute force over qualifying pixels
        qual = [(x, y) for y in range(10) for x in range(10) if m[y, x] >= 0.5]
        xs = [q[0] for q in qual]
        ys = [q[1] for q in qual]
        assert predicted_box(m, extent) == Box(min(xs), min(ys), max(xs), max(ys))


def test_dilate_box_clipped():
    assert dilate_box(Box(0, 0, 7, 7), 64, 64) == Box(0, 0, 9, 9)
    assert dilate_box(Box(60, 60, 63, 63), 64, 64) == Box(59, 59, 63, 63)


def test_checkpoint_roundtrip(tmp_path):
    p = init_params(9)
    path = str(tmp_path / "model_step_0.bin")
    segmodel.save_checkpoint(p, path, meta={"l2": p.l2, "seed": 9})
    q = segmodel.load_checkpoint(path)
    assert np.array_equal(p.weights, q.weights)
    assert q.l2 == p.l2
    with open(path, "rb") as f:
        assert f.read(4) == b"APIS"


def test_checkpoint_truncated(tmp_path):
    p = init_params(9)
    path = str(tmp_path / "model.bin")
    segmodel.save_checkpoint(p, path)
    with open(path, "rb") as f:
        raw = f.read()
    with open(path, "wb") as f:
        f.write(raw[:-8])
    with pytest.raises(FormatViolation):
        segmodel.load_checkpoint(path)


def test_build_supervision_requires_labels(small_data):
    train_ds, _, _, _ = small_data
    with pytest.raises(EmptySupervision):
        build_supervision(train_ds, FeatureCache())
