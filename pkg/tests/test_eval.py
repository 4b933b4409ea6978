import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from organseg.eval import (
    DiceReport,
    boundary,
    calibrate_operating_point,
    dice,
    emit_report,
    leakage_audit,
    make_folds,
    read_summary_csv,
    surface_distance,
    threshold_sweep,
)
from organseg.volume import Mask, Volume


def test_dice_fixtures():
    a = np.zeros((1, 4, 4), dtype=bool)
    a[0, :2, :2] = True
    b = np.zeros_like(a)
    b[0, :1, :2] = True
    assert dice(a, b) == 2 * 2 / (4 + 2)
    assert dice(a, a) == 1.0
    c = np.zeros_like(a)
    c[0, 3, 3] = True
    assert dice(a, c) == 0.0
    assert dice(np.zeros_like(a), np.zeros_like(a)) == 1.0
    with pytest.raises(ValueError):
        dice(a, a[:, :3])


@given(st.integers(0, 2**32 - 1))
def test_dice_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 3, 4, 5)) < 0.4
    d = dice(a, b)
    assert d == dice(b, a)
    assert 0.0 <= d <= 1.0


def plane(z, shape=(10, 6, 6), spacing=(1.0, 1.0, 1.0)):
    m = np.zeros(shape, dtype=bool)
    m[z] = True
    return Mask(m, spacing)


def test_parallel_planes_three_mm():
    mean, std = surface_distance(plane(2), plane(5))
    assert abs(mean - 3.0) <= 1e-9 and abs(std) <= 1e-9


def test_anisotropic_shift_two_mm():
    sp = (1.0, 1.0, 2.0)
    mean, _ = surface_distance(plane(3, spacing=sp), plane(4, spacing=sp))
    assert abs(mean - 2.0) <= 1e-9


def test_identical_masks_zero_and_symmetry(rng):
    a = Mask(rng.random((5, 6, 7)) < 0.3)
    b = Mask(rng.random((5, 6, 7)) < 0.3)
    assert surface_distance(a, a) == (0.0, 0.0)
    m1, s1 = surface_distance(a, b)
    m2, s2 = surface_distance(b, a)
    assert m1 == pytest.approx(m2) and s1 == pytest.approx(s2)
    with pytest.raises(ValueError):
        surface_distance(a, Mask(np.zeros((5, 6, 7), bool)))


def test_boundary_ignores_grid_border():
    full = np.ones((3, 3, 3), dtype=bool)
    assert not boundary(full).any()
    cube = np.zeros((5, 5, 5), dtype=bool)
    cube[1:4, 1:4, 1:4] = True
    assert boundary(cube).sum() == 26


def test_dice_report_stats():
    r = DiceReport([0.2, 0.6, 0.95], ["a", "b", "c"])
    s = r.stats()
    assert s["mean"] == pytest.approx(0.5833333333333334)
    assert s["above_0.5"] == pytest.approx(2 / 3)
    assert s["above_0.9"] == pytest.approx(1 / 3)
    assert s["min"] == 0.2 and s["max"] == 0.95
    with pytest.raises(ValueError):
        DiceReport([1.5])


def test_fold_sizes_and_disjointness():
    ids = [f"p{i:03d}" for i in range(82)]
    plan = make_folds(ids, 4, seed=3)
    assert plan.sizes == (21, 21, 20, 20)
    seen = set()
    for k in range(4):
        test = set(plan.test_ids(k))
        assert not test & seen
        seen |= test
        assert not leakage_audit(plan.train_ids(k), plan.test_ids(k))
    assert seen == set(ids)
    assert make_folds(ids, 4, 3) == plan
    assert leakage_audit(["a", "b"], ["b"])
    with pytest.raises(ValueError):
        make_folds(ids, 1, 0)
    with pytest.raises(ValueError):
        make_folds(["a", "a", "b"], 2, 0)


def _maps():
    gt = np.zeros((2, 4, 4), dtype=bool)
    gt[:, 1:3, 1:3] = True
    p = np.where(gt, 0.7, 0.3)
    p[0, 0, 0] = 0.55
    return [Volume(p)], [Mask(gt)]


def test_calibration_single_value_and_ties():
    maps, gts = _maps()
    op, sweep = calibrate_operating_point(maps, gts, 2, 0.0, [0.4])
    assert op.threshold == 0.4 and op.map_id == 2 and len(sweep) == 1
    op, sweep = calibrate_operating_point(maps, gts, 0, 0.0, [0.6, 0.35, 0.65, 0.5])
    # 0.6 and 0.65 both isolate the organ exactly; the lower one wins
    assert op.threshold == 0.6
    assert [t for t, _ in sweep] == [0.35, 0.5, 0.6, 0.65]
    with pytest.raises(ValueError):
        calibrate_operating_point(maps, gts, 0, 0.0, [])


def test_threshold_sweep_uses_smoothing():
    maps, gts = _maps()
    raw = threshold_sweep(maps, gts, [0.5], 0.0)
    smooth = threshold_sweep(maps, gts, [0.5], 1.0)
    assert raw != smooth


def test_csv_roundtrip_and_empty(tmp_path):
    reports = {"pooled": {"P0": DiceReport([0.5, 0.75]), "S_RF": DiceReport([0.1, 1 / 3])}}
    sweeps = {(0, "G_P0"): ([(0.6, 0.5), (0.2, 0.4)], [(0.2, 0.3), (0.6, 0.45)])}
    paths = emit_report(reports, tmp_path, sweeps=sweeps, cases=[(0, "c1", "P0", 0.5, 1.0, 0.25)])
    rows = read_summary_csv(paths[0])
    stats = {(sc, st, k): v for sc, st, k, v in rows}
    for stage, rep in reports["pooled"].items():
        for k, v in rep.stats().items():
            assert stats[("pooled", stage, k)] == v
    sweep_file = tmp_path / "sweep_fold0_G_P0.csv"
    with open(sweep_file) as f:
        body = list(csv.reader(f))[1:]
    th = [float(r[0]) for r in body]
    assert th == sorted(th) and len(set(th)) == len(th)
    empty = emit_report({}, tmp_path / "e")
    assert empty[0].read_text() == "scope,stage,statistic,value\n"
    assert read_summary_csv(empty[0]) == []
