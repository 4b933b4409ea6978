from pathlib import Path

import numpy as np
import pytest

from organseg.config import validate_config
from organseg.convnet import dumps_model
from organseg.eval import leakage_audit
from organseg.pipeline import (
    STAGES,
    Case,
    cross_validate,
    derive_seed,
    fold_plan,
    make_cases,
    operating_points_table,
    run_fold,
    stage_slug,
    superpixels_for,
)
from organseg.volume import PhantomSpec, make_phantom

TINY = Path(__file__).parent / "data" / "tiny.cfg"


@pytest.fixture(scope="module")
def tiny():
    cfg = validate_config(TINY)
    cases = make_cases(cfg)
    return cfg, cases, cross_validate(cfg, cases)


def test_seed_derivation():
    assert derive_seed(1, 2) == derive_seed(1, 2)
    assert derive_seed(1, 2) != derive_seed(2, 1)
    assert stage_slug("G(P0)") == "G_P0"
    assert stage_slug("CRF(P2)") == "CRF_P2"


def test_cv_structure(tiny):
    cfg, cases, res = tiny
    assert len(res.folds) == cfg["cv.folds"]
    tested = [i for f in res.folds for i in f.test_ids]
    assert sorted(tested) == sorted(c.case_id for c in cases)
    for f in res.folds:
        assert f.leakage == set()
        assert not set(f.train_ids) & set(f.test_ids)
        assert set(f.dice) == set(STAGES)
        assert 0 < f.operating_points["P0"].threshold < 1
        assert f.lam in cfg["crf.lambda_grid"]
    for stage in STAGES:
        assert len(res.pooled[stage].values) == len(cases)
    # the optimal labeling bounds every superpixel-level stage
    for stage in ("S_RF", "P1", "P2", "CRF(P2)"):
        assert res.pooled["Opt"].mean >= res.pooled[stage].mean - 1e-12
    rows = operating_points_table(res.folds)
    assert len(rows) == len(res.folds) * (len(STAGES) - 2)  # no threshold for Opt, S_RF


def test_calibration_ignores_test_cases(tiny):
    cfg, cases, res = tiny
    plan = res.plan
    test_ids = set(plan.test_ids(0))
    swapped = []
    for c in cases:
        if c.case_id in test_ids:
            # same id, entirely different image and ground truth
            v, m = make_phantom(PhantomSpec(seed=99999, dims=tuple(cfg["phantom.dims"]), target_fraction=0.04))
            c = Case(c.case_id, v, m, superpixels_for(cfg, v))
        swapped.append(c)
    again = run_fold(cfg, swapped, plan, 0)
    ref = res.folds[0]
    assert again.operating_points == ref.operating_points
    assert again.lam == ref.lam
    assert again.lambda_sweep == ref.lambda_sweep
    for stage in ref.sweeps:
        assert again.sweeps[stage][0] == ref.sweeps[stage][0]
    assert dumps_model(again.models.pnet) == dumps_model(ref.models.pnet)
    assert dumps_model(again.models.r2) == dumps_model(ref.models.r2)


def test_fold_plan_from_config(tiny):
    cfg, cases, res = tiny
    ids = [c.case_id for c in cases]
    plan = fold_plan(cfg, ids)
    assert plan == res.plan
    for k in range(plan.n_folds):
        assert leakage_audit(plan.train_ids(k), plan.test_ids(k)) == set()


def test_cv_rejects_single_fold(tiny):
    cfg, cases, res = tiny
    from organseg.eval import FoldPlan

    with pytest.raises(ValueError):
        cross_validate(cfg, cases, FoldPlan(tuple(c.case_id for c in cases), (0,) * len(cases)))


def test_cases_are_deterministic(tiny):
    cfg, cases, _ = tiny
    again = make_cases(cfg, with_superpixels=False)
    for a, b in zip(cases, again):
        np.testing.assert_array_equal(a.volume.data, b.volume.data)
        np.testing.assert_array_equal(a.gt.data, b.gt.data)
