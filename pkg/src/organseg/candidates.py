"""Two-level random-forest cascade producing the candidate superpixel set.

Level 1 scores voxels from local features; level 2 scores superpixels from
region aggregates that include the level-1 statistics. A superpixel is kept
when its level-2 probability exceeds the cut.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .forest import RandomForestModel, rf_oob_predict, rf_predict, train_rf
from .superpixel import SuperpixelMap, region_overlaps
from .volume import Mask, Volume

VOXEL_FEATURES = ("intensity", "mean3", "std3", "grad", "x", "y", "z")
HIST_BINS = 8


def voxel_feature_volume(v: Volume) -> np.ndarray:
    """Level-1 features for every voxel, shape ``(nz, ny, nx, 7)``.

    In-slice 3x3 mean/std and central-difference gradient magnitude use
    replicate padding; gradients are in intensity per voxel.
    """
    d = v.data.astype(np.float64)
    nz, ny, nx = d.shape
    mean = ndimage.uniform_filter(d, size=(1, 3, 3), mode="nearest")
    sq = ndimage.uniform_filter(d * d, size=(1, 3, 3), mode="nearest")
    std = np.sqrt(np.maximum(sq - mean * mean, 0.0))
    p = np.pad(d, ((0, 0), (1, 1), (1, 1)), mode="edge")
    gx = (p[:, 1:-1, 2:] - p[:, 1:-1, :-2]) / 2.0
    gy = (p[:, 2:, 1:-1] - p[:, :-2, 1:-1]) / 2.0
    grad = np.hypot(gx, gy)
    zz, yy, xx = np.meshgrid(
        np.arange(nz) / max(nz - 1, 1),
        np.arange(ny) / max(ny - 1, 1),
        np.arange(nx) / max(nx - 1, 1),
        indexing="ij",
    )
    return np.stack([d, mean, std, grad, xx, yy, zz], axis=-1)


def voxel_features(v: Volume, x) -> np.ndarray:
    """Feature vector of the voxel at index ``(z, y, x)``."""
    z, y, xi = (int(t) for t in x)
    if not (0 <= z < v.shape[0] and 0 <= y < v.shape[1] and 0 <= xi < v.shape[2]):
        raise IndexError(f"voxel {x} outside volume of shape {v.shape}")
    lo_z = z
    sub = Volume(v.data[lo_z : lo_z + 1], v.spacing)
    feats = voxel_feature_volume(sub)[0, y, xi].copy()
    feats[6] = z / max(v.shape[0] - 1, 1)
    return feats


def _grouped_minmax(values, groups, n):
    order = np.argsort(groups, kind="stable")
    g, vals = groups[order], values[order]
    starts = np.flatnonzero(np.r_[True, g[1:] != g[:-1]])
    mins = np.full(n, np.nan)
    maxs = np.full(n, np.nan)
    mins[g[starts]] = np.minimum.reduceat(vals, starts)
    maxs[g[starts]] = np.maximum.reduceat(vals, starts)
    return mins, maxs


def superpixel_features(v: Volume, sp: SuperpixelMap, level1_prob=None) -> np.ndarray:
    """Aggregates per global superpixel id, one row per id.

    Columns: mean, std, min, max intensity; 8 histogram counts over the
    volume's min-max range; area; centroid y, x (normalized); slice fraction;
    and, when ``level1_prob`` is given, its mean and std.
    """
    g = sp.global_labels().ravel()
    n = sp.n_total
    d = v.data.astype(np.float64).ravel()
    area = np.bincount(g, minlength=n).astype(np.float64)
    safe = np.maximum(area, 1)
    mean = np.bincount(g, d, n) / safe
    std = np.sqrt(np.maximum(np.bincount(g, d * d, n) / safe - mean**2, 0.0))
    mn, mx = _grouped_minmax(d, g, n)
    lo, hi = float(d.min()), float(d.max())
    span = hi - lo if hi > lo else 1.0
    bins = np.clip(((d - lo) / span * HIST_BINS).astype(np.int64), 0, HIST_BINS - 1)
    hist = np.bincount(g * HIST_BINS + bins, minlength=n * HIST_BINS).reshape(n, HIST_BINS)
    nz, ny, nx = sp.shape
    zz, yy, xx = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    cy = np.bincount(g, yy.ravel(), n) / safe / max(ny - 1, 1)
    cx = np.bincount(g, xx.ravel(), n) / safe / max(nx - 1, 1)
    zf = np.repeat(np.arange(nz), sp.counts) / max(nz - 1, 1)
    cols = [mean, std, mn, mx, *hist.T.astype(np.float64), area, cy, cx, zf]
    if level1_prob is not None:
        p = np.asarray(level1_prob, dtype=np.float64).ravel()
        pm = np.bincount(g, p, n) / safe
        ps = np.sqrt(np.maximum(np.bincount(g, p * p, n) / safe - pm**2, 0.0))
        cols += [pm, ps]
    return np.stack(cols, axis=1)


@dataclass(frozen=True)
class CandidateSet:
    ids: np.ndarray
    cut: float
    recall: float | None = None
    dsc: float | None = None

    def mask(self, sp: SuperpixelMap) -> Mask:
        keep = np.zeros(sp.n_total, dtype=bool)
        keep[self.ids] = True
        return Mask(keep[sp.global_labels()], sp.spacing)

    def __contains__(self, gid):
        i = np.searchsorted(self.ids, gid)
        return i < len(self.ids) and self.ids[i] == gid

    def __len__(self):
        return len(self.ids)


@dataclass
class Cascade:
    level1: RandomForestModel
    level2: RandomForestModel
    cut: float
    level1_cut: float | None = None


def level1_probability(v: Volume, level1: RandomForestModel) -> np.ndarray:
    feats = voxel_feature_volume(v)
    return rf_predict(level1, feats.reshape(-1, feats.shape[-1])).reshape(v.shape)


def _select(level2_prob, feats, cut, level1_cut):
    keep = level2_prob > cut
    if level1_cut is not None:
        keep &= feats[:, -2] > level1_cut
    return np.flatnonzero(keep)


def _candidate_stats(sp, ids, gt):
    if gt is None:
        return None, None
    area, inside = region_overlaps(sp, gt)
    tp = float(inside[ids].sum())
    total = float(inside.sum())
    sel = float(area[ids].sum())
    recall = tp / total if total else 1.0
    dsc = 2 * tp / (sel + total) if sel + total else 1.0
    return recall, dsc


def cascade_candidates(
    v: Volume,
    sp: SuperpixelMap,
    level1: RandomForestModel,
    level2: RandomForestModel,
    cut: float = 0.5,
    gt: Mask | None = None,
    level1_cut: float | None = None,
    level1_prob=None,
    level2_prob=None,
) -> CandidateSet:
    """Score every voxel with level 1, every superpixel with level 2, keep those above ``cut``.

    ``level1_prob``/``level2_prob`` may be supplied precomputed (for example
    out-of-bag scores of training volumes). Recall and DSC of the painted
    candidate mask are filled in when ``gt`` is given.
    """
    if not 0.0 < cut < 1.0:
        raise ValueError(f"cut must lie in (0, 1), got {cut}")
    casc = Cascade(level1, level2, cut, level1_cut)
    if level1_prob is None:
        level1_prob = level1_probability(v, level1)
    feats = superpixel_features(v, sp, level1_prob)
    if level2_prob is None:
        level2_prob = rf_predict(casc.level2, feats)
    ids = _select(level2_prob, feats, cut, level1_cut)
    recall, dsc = _candidate_stats(sp, ids, gt)
    return CandidateSet(ids, cut, recall, dsc)


@dataclass
class CascadeTrainingResult:
    cascade: Cascade
    level1_prob: list  # per training case, cross-fitted
    level2_prob: list  # per training case, held out
    candidates: list  # per training case


def train_cascade(
    volumes,
    sps,
    gts,
    n_trees: int = 32,
    max_depth: int = 10,
    seed: int = 0,
    voxels_per_class: int = 1000,
    positive_overlap: float = 0.0,
    cut: float = 0.5,
    level1_cut: float | None = None,
    recall_target: float | None = None,
    cut_grid=None,
    level1_groups: int = 3,
) -> CascadeTrainingResult:
    """Train both cascade levels on training volumes only.

    Level 1 is fit on a class-balanced voxel sample per volume. Level 2 is fit
    on superpixel aggregates of level-1 scores; with ``level1_groups > 1``
    each training volume is scored at both levels by forests fit on the other
    case groups only (otherwise level-2 scores are out-of-bag). A superpixel is a
    level-2 positive when more than ``positive_overlap`` of its area lies in
    the ground truth. With ``recall_target`` set, the cut is lowered to the
    largest grid value whose mean held-out training recall reaches it.
    """
    ss = np.random.SeedSequence(seed)
    s_sample, s_l1, s_l2 = ss.spawn(3)
    rng = np.random.Generator(np.random.PCG64(s_sample))
    feat_vols = [voxel_feature_volume(v) for v in volumes]
    rows, labels = [], []
    for i, (fv, gt) in enumerate(zip(feat_vols, gts)):
        flat_gt = gt.data.ravel()
        pos = np.flatnonzero(flat_gt)
        neg = np.flatnonzero(~flat_gt)
        take = []
        for pool in (pos, neg):
            k = min(voxels_per_class, len(pool))
            take.append(np.sort(rng.choice(pool, size=k, replace=False)))
        idx = np.concatenate(take)
        rows.append(fv.reshape(-1, fv.shape[-1])[idx])
        labels.append(flat_gt[idx])

    X1 = np.concatenate(rows)
    y1 = np.concatenate(labels).astype(np.uint8)
    level1 = train_rf(X1, y1, n_trees, max_depth, int(s_l1.generate_state(1)[0]))

    # training volumes are scored by forests that never saw them
    # (cross-fitting over case groups), so level 2 and the cut calibration see
    # the same score quality as an unseen test volume
    n = len(volumes)
    flats = [fv.reshape(-1, fv.shape[-1]) for fv in feat_vols]
    groups = None
    if level1_groups > 1 and n > 1:
        groups = np.arange(n) % min(level1_groups, n)
        l1_maps = [None] * n
        for g, sg in enumerate(s_l1.spawn(int(groups.max()) + 1)):
            keep = np.flatnonzero(groups != g)
            held = train_rf(
                np.concatenate([rows[j] for j in keep]),
                np.concatenate([labels[j] for j in keep]).astype(np.uint8),
                n_trees,
                max_depth,
                int(sg.generate_state(1)[0]),
            )
            for j in np.flatnonzero(groups == g):
                l1_maps[j] = rf_predict(held, flats[j])
    else:
        l1_maps = [rf_predict(level1, f) for f in flats]
    l1_maps = [p.reshape(fv.shape[:3]) for p, fv in zip(l1_maps, feat_vols)]

    feats2, y2, spans = [], [], []
    for v, sp, gt, l1 in zip(volumes, sps, gts, l1_maps):
        f = superpixel_features(v, sp, l1)
        area, inside = region_overlaps(sp, gt)
        y2.append((inside > positive_overlap * area) & (inside > 0))
        spans.append(len(f))
        feats2.append(f)
    X2 = np.concatenate(feats2)
    Y2 = np.concatenate(y2).astype(np.uint8)
    level2 = train_rf(
        X2, Y2, n_trees, max_depth, int(s_l2.generate_state(1)[0]), balanced=True
    )
    if groups is not None:
        case_of = np.repeat(np.arange(n), spans)
        oob2 = np.empty(len(X2))
        for g, sg in enumerate(s_l2.spawn(int(groups.max()) + 1)):
            held = groups[case_of] == g
            m2 = train_rf(
                X2[~held], Y2[~held], n_trees, max_depth, int(sg.generate_state(1)[0]),
                balanced=True,
            )  # fmt: skip
            oob2[held] = rf_predict(m2, X2[held])
    else:
        oob2 = rf_oob_predict(level2, X2)
    l2_probs = np.split(oob2, np.cumsum(spans)[:-1])

    if recall_target is not None:
        grid = sorted(set(cut_grid or np.round(np.arange(0.05, 0.951, 0.05), 4).tolist()))
        chosen = None
        for c in grid:
            if c > cut:
                break
            recalls = [
                _candidate_stats(sp, _select(p2, f, c, level1_cut), gt)[0]
                for sp, gt, p2, f in zip(sps, gts, l2_probs, feats2)
            ]
            if np.mean(recalls) >= recall_target:
                chosen = c
        if chosen is not None:
            cut = min(cut, chosen)
        else:
            cut = min(cut, grid[0])

    cascade = Cascade(level1, level2, float(cut), level1_cut)
    cands = []
    for sp, gt, p2, f in zip(sps, gts, l2_probs, feats2):
        ids = _select(p2, f, cascade.cut, level1_cut)
        recall, dsc = _candidate_stats(sp, ids, gt)
        cands.append(CandidateSet(ids, cascade.cut, recall, dsc))
    return CascadeTrainingResult(cascade, l1_maps, l2_probs, cands)


def apply_cascade(cascade: Cascade, v: Volume, sp: SuperpixelMap, gt: Mask | None = None):
    return cascade_candidates(
        v, sp, cascade.level1, cascade.level2, cascade.cut, gt, cascade.level1_cut
    )
