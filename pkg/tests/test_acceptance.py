"""Acceptance criteria 1-9, each at its stated tolerance.

Every test records a one-line verdict that is printed in the terminal
summary. Criteria 7 and 9 share one cross-validation run on the bundled
16-phantom configuration (several minutes on one core).
"""

import contextlib
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import ACCEPTANCE
from oracles import brute_force_optimal_dsc, direct_gaussian_3d, gradient_check, random_small_net

from organseg import bundled_config_path
from organseg.aggregate import gaussian_smooth_3d
from organseg.cli import main
from organseg.config import validate_config
from organseg.crf import brute_force_min, build_crf, energy, max_flow_min_cut
from organseg.eval import dice, leakage_audit, surface_distance
from organseg.pipeline import cross_validate, make_cases
from organseg.regionnet import control_grid, identity_tps, tps_fit
from organseg.superpixel import SuperpixelMap, optimal_labels, region_overlaps
from organseg.volume import Mask, Volume

TINY = Path(__file__).parent / "data" / "tiny.cfg"


@contextlib.contextmanager
def criterion(key, describe):
    """Record PASS/FAIL for ``key``; ``describe()`` supplies the detail text."""
    ok = False
    try:
        yield
        ok = True
    finally:
        try:
            text = describe()
        except Exception as e:  # detail text must never mask the real failure
            text = f"(no detail: {e})"
        ACCEPTANCE[key] = (ok, text)


def test_1_gradient_oracle():
    rng = np.random.default_rng(2024)
    info = {"bad": None, "t": None}
    with criterion("1", lambda: f"gradient mismatches on {info['bad']} of 100 nets, {info['t']:.1f}s"):
        t0 = time.perf_counter()
        failures = [i for i in range(100) if gradient_check(random_small_net(rng, seed=i), rng)]
        info["t"] = time.perf_counter() - t0
        info["bad"] = len(failures)
        assert failures == []
        assert info["t"] < 60


def test_2_maxflow_oracle():
    rng = np.random.default_rng(77)
    info = {"bad": None, "t": None}
    with criterion("2", lambda: f"energy mismatches on {info['bad']} of 1000 graphs, {info['t']:.1f}s"):
        t0 = time.perf_counter()
        bad = 0
        for _ in range(1000):
            n = int(rng.integers(1, 13))
            pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.35]
            g = build_crf(
                rng.random(n),
                np.array(pairs, dtype=np.int64).reshape(-1, 2),
                rng.random(len(pairs)),
                float(rng.choice([0.0, 0.2, 1.0, 5.0])),
                rng.random(len(pairs)) * 4,
            )
            best, _ = brute_force_min(g)
            if abs(energy(g, max_flow_min_cut(g)) - best) > 1e-9:
                bad += 1
        info["t"] = time.perf_counter() - t0
        info["bad"] = bad
        assert bad == 0
        assert info["t"] < 60


def test_3_optimal_label_oracle():
    from fractions import Fraction

    rng = np.random.default_rng(5)
    info = {"bad": None, "t": None}
    with criterion("3", lambda: f"mismatches on {info['bad']} of 100 slices, {info['t']:.1f}s"):
        t0 = time.perf_counter()
        bad = 0
        for _ in range(100):
            k = int(rng.integers(1, 13))
            h, w = int(rng.integers(3, 9)), int(rng.integers(3, 9))
            lab = rng.integers(0, k, (h, w))
            lab.flat[:k] = np.arange(k)  # every region present
            g = rng.random((h, w)) < rng.uniform(0.05, 0.95)
            sp = SuperpixelMap(lab.astype(np.uint32)[None], (1.0, 1.0, 1.0))
            gt = Mask(g[None])
            res = optimal_labels(sp, gt)
            area, inside = region_overlaps(sp, gt)
            best, best_sets = brute_force_optimal_dsc(area.tolist(), inside.tolist())
            sel = res.labels.astype(bool)
            den = int(area[sel].sum()) + int(g.sum())
            got = Fraction(1) if den == 0 else Fraction(2 * int(inside[sel].sum()), den)
            if got != best or tuple(res.labels.tolist()) not in best_sets:
                bad += 1
        info["t"] = time.perf_counter() - t0
        info["bad"] = bad
        assert bad == 0
        assert info["t"] < 60


def test_4_tps_exactness():
    rng = np.random.default_rng(9)
    info = {"err": np.nan, "ident": np.nan, "coef": np.nan}
    with criterion(
        "4",
        lambda: (
            f"max control error {info['err']:.2e} x window, identity error {info['ident']:.2e}, "
            f"translation bending coeffs {info['coef']:.2e}"
        ),
    ):
        errs = []
        for size in (16, 32, 64, 128):
            for grid in (3, 5, 7):
                ctrl = control_grid(size, grid)
                disp = rng.uniform(-0.25, 0.25, ctrl.shape) * size
                t = tps_fit(ctrl, disp)
                errs.append(np.max(np.abs(t(ctrl) - (ctrl + disp))) / size)
        info["err"] = max(errs)
        pts = rng.uniform(0, 63, (500, 2))
        info["ident"] = float(np.max(np.abs(identity_tps(64)(pts) - pts)))
        ctrl = control_grid(64)
        t = tps_fit(ctrl, np.broadcast_to([3.5, -7.25], ctrl.shape))
        info["coef"] = float(np.max(np.abs(t.coeffs)))
        assert info["err"] <= 1e-8
        assert info["ident"] <= 1e-8 * 64
        assert info["coef"] <= 1e-10


def _plane(z, spacing):
    m = np.zeros((10, 6, 6), dtype=bool)
    m[z] = True
    return Mask(m, spacing)


def test_5_metric_oracles():
    info = {}
    with criterion("5", lambda: f"dice 2x2 vs 1x2 = {info.get('d')}, planes {info.get('p')} mm, anisotropic {info.get('a')} mm"):
        a = np.zeros((1, 2, 2), dtype=bool)
        a[:] = True
        b = np.zeros_like(a)
        b[0, 0, :] = True
        info["d"] = dice(a, b)
        assert info["d"] == 2 / 3
        assert dice(a, a) == 1.0 and dice(b, ~b) == 0.0
        m, s = surface_distance(_plane(2, (1, 1, 1)), _plane(5, (1, 1, 1)))
        info["p"] = m
        assert abs(m - 3.0) <= 1e-9 and abs(s) <= 1e-9
        m, _ = surface_distance(_plane(3, (1, 1, 2)), _plane(4, (1, 1, 2)))
        info["a"] = m
        assert abs(m - 2.0) <= 1e-9
        assert surface_distance(_plane(3, (1, 1, 1)), _plane(3, (1, 1, 1))) == (0.0, 0.0)


def test_6_smoothing_properties():
    rng = np.random.default_rng(3)
    info = {}
    with criterion("6", lambda: f"impulse error {info.get('imp', np.nan):.2e}, constancy error {info.get('const', np.nan):.2e}"):
        d = rng.random((5, 6, 7)).astype(np.float32)
        assert gaussian_smooth_3d(Volume(d), 0.0).data.tobytes() == d.tobytes()
        errs = []
        for c in (0.0, 0.3, 1.0):
            for s in (0.5, 1.0, 3.0):
                out = gaussian_smooth_3d(Volume(np.full((6, 7, 8), c, np.float32)), s).data
                errs.append(float(np.max(np.abs(out - c))))
        info["const"] = max(errs)
        assert info["const"] <= 1e-6
        imp = np.zeros((11, 11, 11))
        imp[5, 5, 5] = 1.0
        worst = 0.0
        for s in (0.8, 1.5, 3.0):
            got = gaussian_smooth_3d(Volume(imp), s).data
            worst = max(worst, float(np.max(np.abs(got - direct_gaussian_3d(imp, s)))))
        info["imp"] = worst
        assert worst <= 1e-6


@pytest.fixture(scope="session")
def bundled_cv():
    cfg = validate_config(bundled_config_path())
    t0 = time.perf_counter()
    cases = make_cases(cfg)
    res = cross_validate(cfg, cases)
    return cfg, cases, res, time.perf_counter() - t0


@pytest.mark.slow
def test_7_pipeline_ordering(bundled_cv):
    cfg, _, res, seconds = bundled_cv
    mean = {s: r.mean for s, r in res.pooled.items()}
    recalls = [r for f in res.folds for r in f.candidate_recall]
    info = {"recall": float(np.mean(recalls)), "min": float(np.min(recalls))}

    def describe():
        return (
            f"candidate recall mean {info['recall']:.3f} (min {info['min']:.3f}); "
            + ", ".join(f"{s} {mean[s]:.3f}" for s in ("S_RF", "P0", "G(P0)", "P1", "G(P1)", "P2", "G(P2)", "CRF(P2)"))
            + f"; {seconds / 60:.1f} min"
        )

    with criterion("7", describe):
        assert info["recall"] >= 0.97
        for k in range(3):
            assert mean[f"G(P{k})"] >= mean[f"P{k}"], k
        assert mean["G(P2)"] >= mean["S_RF"] + 0.15


def _tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_8_determinism(tmp_path):
    info = {"n": 0, "diff": None}
    with criterion("8", lambda: f"{info['n']} report/model files compared, differing: {info['diff']}"):
        trees = []
        for run in ("a", "b"):
            work = tmp_path / run
            assert main(["cv", "--config", str(TINY), "--workdir", str(work)]) == 0
            trees.append(_tree_bytes(work / "cv"))
        a, b = trees
        info["n"] = len(a)
        info["diff"] = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
        assert any(k.endswith(".csv") for k in a)
        assert any(k.endswith(".cnvn") for k in a)
        assert info["diff"] == []


@pytest.mark.slow
def test_9_leakage_audit(bundled_cv):
    from organseg.convnet import dumps_model
    from organseg.pipeline import Case, run_fold, superpixels_for
    from organseg.volume import PhantomSpec, make_phantom

    cfg, cases, res, _ = bundled_cv
    info = {"folds": 0, "same": None}
    with criterion(
        "9",
        lambda: f"{info['folds']} folds with empty train/test intersection; "
        f"calibration unchanged when test cases are replaced: {info['same']}",
    ):
        for f in res.folds:
            assert f.leakage == set()
            assert leakage_audit(f.train_ids, f.test_ids) == set()
            assert not set(f.train_ids) & set(f.test_ids)
            info["folds"] += 1
        # replacing every test case of fold 0 by an unrelated phantom must
        # leave all calibrated quantities and trained models untouched
        test_ids = set(res.plan.test_ids(0))
        swapped = []
        for i, c in enumerate(cases):
            if c.case_id in test_ids:
                v, m = make_phantom(PhantomSpec(seed=777_000 + i, dims=tuple(cfg["phantom.dims"])))
                c = Case(c.case_id, v, m, superpixels_for(cfg, v))
            swapped.append(c)
        again = run_fold(cfg, swapped, res.plan, 0)
        ref = res.folds[0]
        same = (
            again.operating_points == ref.operating_points
            and again.lam == ref.lam
            and again.lambda_sweep == ref.lambda_sweep
            and all(again.sweeps[s][0] == ref.sweeps[s][0] for s in ref.sweeps)
            and dumps_model(again.models.edge) == dumps_model(ref.models.edge)
        )
        info["same"] = same
        assert same
