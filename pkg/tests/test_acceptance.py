"""End-to-end acceptance checks A1-A14.

Each test prints a single "A<n> PASS/FAIL" line. The heavyweight experiment
fixtures (a seed-0 entropy run, a 5-strategy x 5-seed sweep, an AFIS run, and
a directional sweep) are session-scoped and shared across criteria.
"""

import json
import os
import time

import numpy as np
import pytest

from apislab import segmodel, selection, synthgen
from apislab.cli import main as cli_main
from apislab.core import Box, read_point_set, validate_point_set
from apislab.driver import ExperimentConfig, Runner, read_metrics_csv
from apislab.evaluation import boundary_distance_map, boundary_pixels
from apislab.segmodel import FEATURE_DIM, ModelParams, PredictionSet, loss_and_grad
from apislab.selection import SelectionDomain, detection_loss, giou, select_point
from apislab.sweep import run_sweep
from apislab.uncertainty import LN2, entropy

SWEEP_SEEDS = (0, 1, 2, 3, 4)
STEPS = 5


def _verdict(name: str, ok: bool, detail: str = ""):
    print(f"{name} {'PASS' if ok else 'FAIL'}" + (f": {detail}" if detail else ""))
    assert ok, f"{name}: {detail}"


@pytest.fixture(scope="session")
def accept_root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def _run(default_data, root, strategy, seed, **kw):
    train, train_truths, test, test_truths = default_data
    cfg = ExperimentConfig(name=f"{strategy}_s{seed}", strategy=strategy, seed=seed, steps=STEPS, **kw)
    run_dir = os.path.join(str(root), f"{strategy}_s{seed}")
    return Runner(cfg, train, train_truths, test, test_truths, run_dir=run_dir).run(), run_dir


@pytest.fixture(scope="session")
def entropy_run(default_data, accept_root):
    return _run(default_data, accept_root, "entropy", 0)


@pytest.fixture(scope="session")
def strategy_sweep(default_data, accept_root):
    """metrics rows per (strategy, seed), plus total wall time."""
    t0 = time.monotonic()
    runs = {}
    for strategy in ("entropy", "random", "lowest-entropy", "max-error", "least-error"):
        for seed in SWEEP_SEEDS:
            report, _ = _run(default_data, accept_root, strategy, seed)
            runs[(strategy, seed)] = report.metrics
    return runs, time.monotonic() - t0


def _seed_mean(runs, strategy, step, column):
    return float(np.mean([runs[(strategy, s)][step][column] for s in SWEEP_SEEDS]))


class TestA1:
    def test_entropy_math(self, rng):
        ok = abs(entropy(0.5) - LN2) < 1e-12 and entropy(0.0) == 0.0 and entropy(1.0) == 0.0
        ps = rng.uniform(0, 1, 1000)
        sym = float(np.max(np.abs(entropy(ps) - entropy(1.0 - ps))))
        ok = ok and sym < 1e-12
        _verdict("A1", ok, f"H(1/2)-ln2 = {entropy(0.5) - LN2:.2e}, max symmetry gap {sym:.2e}")


class TestA2:
    def test_selection_oracle_equivalence(self):
        rng = np.random.default_rng(42)
        t0 = time.monotonic()
        agree = 0
        total = 10_000
        for i in range(total):
            h, w = int(rng.integers(1, 17)), int(rng.integers(1, 17))
            box = Box(0, 0, w - 1, h - 1)
            use_variance = i % 2 == 1
            k = int(rng.integers(2, 13)) if use_variance else int(rng.integers(1, 13))
            maps = rng.uniform(0, 1, size=(k, h, w))
            ps = PredictionSet(image_id="x", instance_id="i", extent=box, maps=maps, mode="A")
            domain = SelectionDomain.build(box, set())
            if use_variance:
                score = ((maps - maps.mean(axis=0)) ** 2).mean(axis=0)
            else:
                score = -np.abs(maps.mean(axis=0) - 0.5)
            best = score.max()
            ys, xs = np.nonzero(score == best)  # row-major scan order
            expected = (int(xs[0]), int(ys[0]))
            got = select_point("variance" if use_variance else "entropy", ps, domain, rng)
            agree += got == expected
        elapsed = time.monotonic() - t0
        ok = agree == total and elapsed < 30.0
        _verdict("A2", ok, f"{agree}/{total} agreements in {elapsed:.1f} s")


class TestA3:
    def test_ledger_laws(self, default_data, entropy_run):
        report, run_dir = entropy_run
        train, train_truths = default_data[0], default_data[1]
        q = train.q_total
        ok = True
        reasons = []
        for s in range(STEPS + 1):
            pset = read_point_set(os.path.join(run_dir, f"points_step_{s}.json"))
            if len(pset) != (s + 1) * q:
                ok, _ = False, reasons.append(f"|P_{s}| = {len(pset)} != {(s + 1) * q}")
            if validate_point_set(pset, train):
                ok, _ = False, reasons.append(f"step {s}: structural violations")
            for p in pset.points:
                if int(train_truths[p.key][p.y, p.x]) != p.label:
                    ok, _ = False, reasons.append(f"step {s}: label mismatch at {p.pixel_key}")
                    break
        with open(os.path.join(run_dir, "report.json")) as f:
            spent = json.load(f)["ledger"]["spent_seconds"]
        expected = (STEPS + 1) * q * 0.9
        if abs(spent - expected) > 1e-6:
            ok, _ = False, reasons.append(f"spent {spent} != {expected}")
        _verdict("A3", ok, "; ".join(reasons) or f"|P_s| = (s+1)*{q}, labels = GT, spent = {spent:.1f} s")


class TestA4:
    def test_budget_arithmetic(self):
        from apislab.core import budget_equivalent_masks

        got = budget_equivalent_masks(860000)
        _verdict("A4", got == 9773, f"budget_equivalent_masks(860000) = {got}")


class TestA5:
    def test_gradient_check(self):
        rng = np.random.default_rng(11)
        h = 1e-6
        worst = 0.0
        for _ in range(100):
            k = int(rng.integers(1, 5))
            n = int(rng.integers(1, 32))
            p = ModelParams(weights=rng.normal(0, 1, size=(k, FEATURE_DIM)), l2=1e-4)
            feats = rng.uniform(-0.5, 1.5, size=(n, FEATURE_DIM))
            labels = rng.integers(0, 2, size=n).astype(np.float64)
            _, grad = loss_and_grad(p, feats, labels)
            num = np.zeros_like(grad)
            for i in range(k):
                for j in range(FEATURE_DIM):
                    wp, wm = p.weights.copy(), p.weights.copy()
                    wp[i, j] += h
                    wm[i, j] -= h
                    lp, _ = loss_and_grad(ModelParams(weights=wp, l2=p.l2), feats, labels)
                    lm, _ = loss_and_grad(ModelParams(weights=wm, l2=p.l2), feats, labels)
                    num[i, j] = (lp - lm) / (2 * h)
            denom = np.maximum(np.abs(grad), np.abs(num))
            denom[denom < 1e-8] = 1.0
            worst = max(worst, float(np.max(np.abs(grad - num) / denom)))
        _verdict("A5", worst < 1e-4, f"max relative error {worst:.2e}")


class TestA6:
    def test_giou_cases(self):
        l_same = detection_loss(Box(0, 0, 4, 4), Box(0, 0, 4, 4))
        l_touch = detection_loss(Box(0, 0, 1, 1), Box(2, 0, 3, 1))
        l_corner = detection_loss(Box(0, 0, 1, 1), Box(1, 1, 2, 2))
        expected_corner = 1.0 - (1 / 7 - 2 / 9)
        ok = (
            l_same == 0.0
            and abs(l_touch - 1.0) < 1e-9
            and abs(l_corner - expected_corner) < 1e-9
            and giou(Box(0, 0, 1, 1), Box(1, 1, 2, 2)) == pytest.approx(1 / 7 - 2 / 9, abs=1e-9)
        )
        _verdict("A6", ok, f"losses {l_same}, {l_touch}, {l_corner:.9f}")


class TestA7:
    def test_cli_determinism(self, tmp_path):
        data = str(tmp_path / "ds")
        assert cli_main(["gen-data", "--seed", "5", "--train", "8", "--test", "4", "--out", data]) == 0
        roots = [str(tmp_path / f"r{i}") for i in (1, 2)]
        for root in roots:
            rc = cli_main(["run", "--data", data, "--strategy", "entropy", "--seed", "0",
                           "--steps", "2", "--schedule", "short", "--name", "det", "--runs-root", root])
            assert rc == 0
        names = ["metrics.csv"] + [f"points_step_{s}.json" for s in range(3)] + [f"model_step_{s}.bin" for s in range(3)]
        ok = True
        for name in names:
            with open(os.path.join(roots[0], "det", name), "rb") as f:
                a = f.read()
            with open(os.path.join(roots[1], "det", name), "rb") as f:
                b = f.read()
            if a != b:
                ok = False
        _verdict("A7", ok, f"{len(names)} artifacts bit-identical" if ok else "artifact mismatch")


class TestA8:
    def test_learning_sanity(self, default_data, entropy_run):
        report, _ = entropy_run
        test, test_truths = default_data[2], default_data[3]
        # constant-0.5 prediction fills every box (ties go to foreground)
        baseline = float(np.mean([
            test_truths[rec.key].sum() / rec.box.area for rec in test.instances
        ]))
        iou0 = report.metrics[0]["test_mean_iou"]
        maps = [row["test_map"] for row in report.metrics]
        drops = [maps[s] - maps[s + 1] for s in range(STEPS)]
        ok = iou0 >= baseline + 0.2 and maps[STEPS] >= maps[0] and max(drops) <= 0.01
        _verdict("A8", ok, f"IoU0 {iou0:.4f} vs baseline {baseline:.4f}; mAP {maps[0]:.4f}->{maps[STEPS]:.4f}, worst drop {max(drops):.4f}")


class TestA9:
    def test_strategy_ordering(self, strategy_sweep):
        runs, elapsed = strategy_sweep
        reasons = []
        ok = elapsed < 7200
        if not ok:
            reasons.append(f"sweep took {elapsed:.0f} s")
        for step in (2, 3):
            e = _seed_mean(runs, "entropy", step, "test_map")
            r = _seed_mean(runs, "random", step, "test_map")
            l = _seed_mean(runs, "lowest-entropy", step, "test_map")
            if not (e >= r >= l):
                ok = False
                reasons.append(f"step {step}: entropy {e:.4f}, random {r:.4f}, lowest {l:.4f}")
        for step in range(1, STEPS + 1):
            m = _seed_mean(runs, "max-error", step, "test_map")
            others = {s: _seed_mean(runs, s, step, "test_map") for s in ("entropy", "random", "lowest-entropy")}
            if any(m >= v for v in others.values()):
                ok = False
                reasons.append(f"step {step}: max-error {m:.4f} not worst ({min(others.values()):.4f})")
        _verdict("A9", ok, "; ".join(reasons) or f"ordering holds over {len(SWEEP_SEEDS)} seeds in {elapsed:.0f} s")


class TestA10:
    def test_misclassification_ordering(self, strategy_sweep):
        runs, _ = strategy_sweep
        vals = {s: _seed_mean(runs, s, 1, "new_point_misclass_ratio")
                for s in ("max-error", "entropy", "random", "least-error")}
        order = ["max-error", "entropy", "random", "least-error"]
        gaps = [vals[order[i]] - vals[order[i + 1]] for i in range(3)]
        ok = all(g >= 0.05 for g in gaps)
        _verdict("A10", ok, ", ".join(f"{s} {vals[s]:.3f}" for s in order))


class TestA11:
    def test_boundary_distance_trend(self, strategy_sweep):
        runs, _ = strategy_sweep
        ent = [_seed_mean(runs, "entropy", s, "mean_boundary_dist") for s in range(STEPS + 1)]
        rnd = [_seed_mean(runs, "random", s, "mean_boundary_dist") for s in range(STEPS + 1)]
        ok = all(ent[s] <= rnd[s] for s in range(1, STEPS + 1))
        ok = ok and all(ent[s + 1] <= ent[s] + 0.25 for s in range(1, STEPS))
        _verdict("A11", ok, f"entropy {[round(v, 2) for v in ent[1:]]} vs random {[round(v, 2) for v in rnd[1:]]}")


class TestA12:
    def test_distance_transform_oracle(self):
        mismatches = 0
        checked = 0
        for seed in range(50):
            scene = synthgen.generate_scene(10_000 + seed)
            for key, mask in scene.truth.masks.items():
                if not mask.any():
                    continue
                dmap = boundary_distance_map(mask)
                bys, bxs = np.nonzero(boundary_pixels(mask))
                ys, xs = np.mgrid[0 : mask.shape[0], 0 : mask.shape[1]]
                d2 = (ys.ravel()[:, None] - bys) ** 2 + (xs.ravel()[:, None] - bxs) ** 2
                exact = np.sqrt(d2.min(axis=1)).reshape(mask.shape)
                checked += 1
                if not np.array_equal(dmap, exact):
                    mismatches += 1
        _verdict("A12", mismatches == 0, f"{checked} masks, {mismatches} mismatches")


class TestA13:
    def test_afis_budget_equalization(self, default_data, accept_root, entropy_run):
        apis_report, _ = entropy_run
        afis_report, run_dir = _run(default_data, accept_root, "afis-instance", 0)
        q = default_data[0].q_total
        per_step = int(np.floor(q * 0.9 / 79.2))
        ok = True
        reasons = []
        for s in range(STEPS + 1):
            a = apis_report.metrics[s]["budget_seconds"]
            b = afis_report.metrics[s]["budget_seconds"]
            if a != b:
                ok = False
                reasons.append(f"step {s}: budget {b} != {a}")
            masks = afis_report.metrics[s]["n_masks"]
            if masks != (s + 1) * per_step:
                ok = False
                reasons.append(f"step {s}: {masks} masks != {(s + 1) * per_step}")
        _verdict("A13", ok, "; ".join(reasons) or f"budgets equal, {per_step} masks/step")


class TestA14:
    def test_directional_reports(self, default_data, accept_root):
        train, train_truths, test, test_truths = default_data
        base = ExperimentConfig(steps=3, schedule="short")
        out_dir = os.path.join(str(accept_root), "directional")
        report = run_sweep(
            base, ["entropy", "random"], [0, 1],
            train, train_truths, test, test_truths,
            out_dir=out_dir, schedules=["short", "long"], transfer_heads=8,
        )
        d = report["directional"]
        required = ("long_widens_gap", "transfer_above_random", "largest_gap_on_large_bucket")
        ok = all(k in d for k in required) and os.path.exists(os.path.join(out_dir, "sweep_summary.csv"))
        _verdict("A14", ok, ", ".join(f"{k}={d.get(k)}" for k in required) + " (non-blocking directions)")
