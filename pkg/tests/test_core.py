import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apislab import core
from apislab.core import (
    Box,
    Dataset,
    ImageRaster,
    InstanceRecord,
    PointAnnotation,
    PointSet,
    budget_cost,
    budget_equivalent_masks,
    empty_point_set,
    merge_point_set,
    read_point_set,
    validate_point_set,
    write_point_set,
)
from apislab.errors import DuplicatePoint, InvalidConstant, OutOfBox


def _toy_dataset():
    img = ImageRaster("im0", 16, 16, np.zeros((16, 16, 3)))
    recs = (
        InstanceRecord("im0", "a", 0, Box(2, 2, 7, 7)),
        InstanceRecord("im0", "b", 1, Box(8, 8, 15, 15)),
    )
    return Dataset(images=(img,), instances=recs)


def _pt(inst, x, y, label=1, step=0):
    return PointAnnotation("im0", inst, x, y, label, step)


class TestMerge:
    def test_size_law_two_instances(self):
        ds = _toy_dataset()
        p0 = merge_point_set(empty_point_set(), [_pt("a", 2, 2), _pt("b", 8, 8)], ds)
        assert len(p0) == 2 and p0.step == 0
        p1 = merge_point_set(p0, [_pt("a", 3, 3, step=1), _pt("b", 9, 9, step=1)], ds)
        assert len(p1) == 4 == (1 + 1) * 2
        assert p1.step == 1

    def test_duplicate_rejected(self):
        ds = _toy_dataset()
        p0 = merge_point_set(empty_point_set(), [_pt("a", 2, 2)], ds)
        with pytest.raises(DuplicatePoint):
            merge_point_set(p0, [_pt("a", 2, 2, step=1)], ds)

    def test_empty_merge_is_noop(self):
        ds = _toy_dataset()
        p0 = merge_point_set(empty_point_set(), [_pt("a", 2, 2)], ds)
        assert merge_point_set(p0, [], ds) is p0

    def test_out_of_box_rejected(self):
        with pytest.raises(OutOfBox):
            merge_point_set(empty_point_set(), [_pt("a", 0, 0)], _toy_dataset())

    def test_monotone_supervision(self):
        ds = _toy_dataset()
        p0 = merge_point_set(empty_point_set(), [_pt("a", 2, 2)], ds)
        p1 = merge_point_set(p0, [_pt("a", 3, 2, step=1)], ds)
        assert set(p0.points) <= set(p1.points)


class TestBudget:
    def test_single_point_cost(self):
        assert budget_cost(1, 0) == pytest.approx(0.9)

    def test_zero(self):
        assert budget_cost(0, 0) == 0.0

    def test_full_scale_point_cost(self):
        assert budget_cost(860000, 0) == pytest.approx(774000.0)

    def test_equivalent_masks_full_scale(self):
        assert budget_equivalent_masks(860000) == 9773

    def test_equivalent_masks_zero(self):
        assert budget_equivalent_masks(0) == 0

    def test_equivalent_masks_exact_boundary(self):
        # 88 * 0.9 / 79.2 = 1.0 exactly
        assert budget_equivalent_masks(88) == 1

    def test_invalid_mask_cost(self):
        with pytest.raises(InvalidConstant):
            budget_equivalent_masks(10, t_mask=0.0)

    @given(
        a=st.tuples(st.integers(0, 10**6), st.integers(0, 10**4)),
        b=st.tuples(st.integers(0, 10**6), st.integers(0, 10**4)),
    )
    def test_cost_linearity(self, a, b):
        total = budget_cost(a[0] + b[0], a[1] + b[1])
        assert total == pytest.approx(budget_cost(*a) + budget_cost(*b))

    @given(n=st.integers(0, 10**7))
    @settings(max_examples=200)
    def test_equivalent_masks_nearest(self, n):
        # nearest-count equivalence: off by at most half a mask's cost
        m = budget_equivalent_masks(n)
        assert abs(m * 79.2 - n * 0.9) <= 79.2 / 2 + 1e-9


class TestValidation:
    def test_valid_set_empty_report(self):
        ds = _toy_dataset()
        p0 = merge_point_set(empty_point_set(), [_pt("a", 2, 2), _pt("b", 15, 15)], ds)
        assert validate_point_set(p0, ds) == []

    def test_box_corner_inclusive(self):
        ds = _toy_dataset()
        p0 = merge_point_set(empty_point_set(), [_pt("a", 7, 7)], ds)
        assert validate_point_set(p0, ds) == []

    def test_unknown_instance_reported(self):
        ds = _toy_dataset()
        ps = PointSet(points=(PointAnnotation("im0", "zz", 1, 1, 0, 0),), step=0)
        report = validate_point_set(ps, ds)
        assert [i.kind for i in report] == ["UnknownInstance"]

    def test_out_of_box_reported(self):
        ds = _toy_dataset()
        ps = PointSet(points=(PointAnnotation("im0", "a", 0, 0, 0, 0),), step=0)
        report = validate_point_set(ps, ds)
        assert [i.kind for i in report] == ["OutOfBox"]

    def test_merge_output_always_validates(self, rng):
        ds = _toy_dataset()
        ps = empty_point_set()
        for step in range(4):
            pts = []
            for inst, box in (("a", Box(2, 2, 7, 7)), ("b", Box(8, 8, 15, 15))):
                taken = ps.pixels_for("im0", inst) | {(p.x, p.y) for p in pts if p.instance_id == inst}
                while True:
                    x = int(rng.integers(box.x_min, box.x_max + 1))
                    y = int(rng.integers(box.y_min, box.y_max + 1))
                    if (x, y) not in taken:
                        break
                pts.append(PointAnnotation("im0", inst, x, y, int(rng.integers(2)), step))
            ps = merge_point_set(ps, pts, ds)
            assert validate_point_set(ps, ds) == []
            assert len(ps) == (step + 1) * 2


def test_point_set_roundtrip(tmp_path):
    ds = _toy_dataset()
    p0 = merge_point_set(empty_point_set(), [_pt("a", 2, 3, label=0), _pt("b", 9, 14)], ds)
    path = tmp_path / "points_step_0.json"
    write_point_set(p0, path)
    assert read_point_set(path) == p0
    # byte-stable
    first = path.read_bytes()
    write_point_set(p0, path)
    assert path.read_bytes() == first
