"""Dice and surface-distance metrics, fold plans, operating-point calibration
and CSV report emission."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .aggregate import OperatingPoint, gaussian_smooth_3d, threshold

DSC_LEVELS = (0.1, 0.3, 0.5, 0.7, 0.8, 0.9)


def _pair(a, b):
    da = np.asarray(a.data if hasattr(a, "data") else a, dtype=bool)
    db = np.asarray(b.data if hasattr(b, "data") else b, dtype=bool)
    if da.shape != db.shape:
        raise ValueError(f"mask shapes differ: {da.shape} vs {db.shape}")
    return da, db


def dice(a, b) -> float:
    """2|a & b| / (|a| + |b|); two empty masks score 1."""
    da, db = _pair(a, b)
    total = int(da.sum()) + int(db.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(da & db)) / total


_SIX = ndimage.generate_binary_structure(3, 1)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background 6-neighbour.

    Voxels outside the grid do not count as background.
    """
    m = np.asarray(mask, dtype=bool)
    inner = ndimage.binary_erosion(m, structure=_SIX, border_value=1)
    return m & ~inner


def surface_distance(a, b, spacing=None):
    """Average symmetric surface distance in mm: ``(mean, std)``.

    All boundary-to-nearest-boundary distances from both directions are
    pooled. ``spacing`` is ``(sx, sy, sz)``, defaulting to ``a.spacing``.
    """
    da, db = _pair(a, b)
    if not da.any() or not db.any():
        raise ValueError("surface distance needs two nonempty masks")
    if spacing is None:
        spacing = a.spacing
    sx, sy, sz = (float(s) for s in spacing)
    sampling = (sz, sy, sx)
    ba, bb = boundary(da), boundary(db)
    dist_to_b = ndimage.distance_transform_edt(~bb, sampling=sampling)
    dist_to_a = ndimage.distance_transform_edt(~ba, sampling=sampling)
    d = np.concatenate([dist_to_b[ba], dist_to_a[bb]])
    return float(d.mean()), float(d.std())


@dataclass
class DiceReport:
    values: np.ndarray
    case_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any((self.values < 0) | (self.values > 1)):
            raise ValueError("DSC values must lie in [0, 1]")

    @property
    def mean(self):
        return float(self.values.mean()) if len(self.values) else float("nan")

    @property
    def std(self):
        return float(self.values.std()) if len(self.values) else float("nan")

    @property
    def min(self):
        return float(self.values.min()) if len(self.values) else float("nan")

    @property
    def max(self):
        return float(self.values.max()) if len(self.values) else float("nan")

    def fraction_above(self, levels=DSC_LEVELS):
        if not len(self.values):
            return {lv: float("nan") for lv in levels}
        return {lv: float(np.mean(self.values > lv)) for lv in levels}

    def stats(self):
        out = {"mean": self.mean, "std": self.std, "min": self.min, "max": self.max}
        for lv, frac in self.fraction_above().items():
            out[f"above_{lv:g}"] = frac
        return out


@dataclass(frozen=True)
class FoldPlan:
    case_ids: tuple
    assignment: tuple  # fold index per case

    @property
    def n_folds(self):
        return max(self.assignment) + 1 if self.assignment else 0

    @property
    def sizes(self):
        return tuple(self.assignment.count(k) for k in range(self.n_folds))

    def test_ids(self, k):
        return [c for c, a in zip(self.case_ids, self.assignment) if a == k]

    def train_ids(self, k):
        return [c for c, a in zip(self.case_ids, self.assignment) if a != k]


def make_folds(case_ids, n_folds: int, seed: int) -> FoldPlan:
    """Random hard split with sizes as equal as possible, larger folds first."""
    ids = list(case_ids)
    if n_folds < 2:
        raise ValueError("at least 2 folds are required")
    if len(ids) < n_folds:
        raise ValueError("more folds than cases")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate case ids")
    rng = np.random.Generator(np.random.PCG64(seed))
    order = rng.permutation(len(ids))
    base, extra = divmod(len(ids), n_folds)
    sizes = [base + (k < extra) for k in range(n_folds)]
    fold_of = np.repeat(np.arange(n_folds), sizes)
    assignment = [0] * len(ids)
    for pos, i in enumerate(order):
        assignment[i] = int(fold_of[pos])
    return FoldPlan(tuple(ids), tuple(assignment))


def id_digest(case_id) -> str:
    return hashlib.sha256(str(case_id).encode()).hexdigest()


def leakage_audit(train_ids, test_ids) -> set:
    """Hash-set intersection of train and test ids; empty means no leakage."""
    return {id_digest(c) for c in train_ids} & {id_digest(c) for c in test_ids}


def threshold_sweep(maps, gts, grid, sigma: float = 0.0):
    """Mean DSC over cases for each threshold in ascending ``grid``."""
    smoothed = [gaussian_smooth_3d(p, sigma) if sigma > 0 else p for p in maps]
    out = []
    for t in sorted(set(float(x) for x in grid)):
        out.append((t, float(np.mean([dice(threshold(p, t), g) for p, g in zip(smoothed, gts)]))))
    return out


def calibrate_operating_point(maps, gts, map_id: int, sigma: float, grid):
    """Threshold with the highest mean training DSC (ties to the lower value).

    Returns ``(OperatingPoint, sweep)``.
    """
    if not len(grid):
        raise ValueError("empty threshold grid")
    sweep = threshold_sweep(maps, gts, grid, sigma)
    best = max(d for _, d in sweep)
    t = next(t for t, d in sweep if d == best)
    return OperatingPoint(map_id, t, sigma), sweep


# --------------------------------------------------------------------------
# CSV emission

SUMMARY_COLUMNS = ("scope", "stage", "statistic", "value")
CASE_COLUMNS = ("fold", "case", "stage", "dsc", "asd_mean_mm", "asd_std_mm")
SWEEP_COLUMNS = ("threshold", "mean_dsc_train", "mean_dsc_test")


def _fmt(x) -> str:
    return repr(float(x))


def write_summary_csv(path, rows) -> None:
    """``rows``: iterable of (scope, stage, statistic, value)."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for scope, stage, stat, val in rows:
            w.writerow([scope, stage, stat, _fmt(val)])


def read_summary_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        r = csv.reader(f)
        header = next(r)
        if tuple(header) != SUMMARY_COLUMNS:
            raise ValueError(f"unexpected header {header}")
        return [(a, b, c, float(d)) for a, b, c, d in r]


def write_sweep_csv(path, train_sweep, test_sweep) -> None:
    test = dict(test_sweep)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for t, d in sorted(train_sweep):
            w.writerow([_fmt(t), _fmt(d), _fmt(test.get(t, float("nan")))])


def report_rows(reports):
    """Summary rows for a mapping ``scope -> {stage: DiceReport}``."""
    for scope, stages in reports.items():
        for stage, rep in stages.items():
            for stat, val in rep.stats().items():
                yield scope, stage, stat, val


def emit_report(reports, out_dir, sweeps=None, cases=None):
    """Write ``summary.csv``, optional ``cases.csv`` and one sweep file per (fold, stage).

    ``sweeps`` maps ``(fold, stage)`` to ``(train_sweep, test_sweep)``.
    Returns the list of written paths.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "summary.csv"]
    write_summary_csv(written[0], report_rows(reports or {}))
    if cases is not None:
        p = out / "cases.csv"
        with open(p, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(CASE_COLUMNS)
            for fold, case, stage, d, m, s in cases:
                w.writerow([fold, case, stage, _fmt(d), _fmt(m), _fmt(s)])
        written.append(p)
    for (fold, stage), (tr, te) in sorted((sweeps or {}).items()):
        p = out / f"sweep_fold{fold}_{stage}.csv"
        write_sweep_csv(p, tr, te)
        written.append(p)
    return written
