"""End-to-end training and evaluation of the full cascade, fold by fold.

Stage names follow the result table: ``Opt`` (optimal superpixel labels,
an upper bound), ``S_RF`` (candidate mask), ``P0``/``P1``/``P2`` (patch,
region and two-channel region maps) with smoothed variants ``G(Pk)``, and
``CRF(P2)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .aggregate import OperatingPoint, average_scales, gaussian_smooth_3d, paint_voxels, threshold
from .candidates import CandidateSet, apply_cascade, train_cascade
from .config import PipelineConfig
from .convnet import ConvNetModel, default_spec, predict_proba, train_sgd
from .crf import CrfCase, build_edge_dataset, candidate_edges, edge_crops, grid_search_lambda
from .eval import (
    DiceReport,
    FoldPlan,
    calibrate_operating_point,
    dice,
    leakage_audit,
    make_folds,
    surface_distance,
    threshold_sweep,
)
from .patchnet import DenseLabelConfig, build_patch_dataset, dense_label, normalize_intensity
from .regionnet import augment_dataset, classify_regions, region_dataset
from .superpixel import (
    OptimalLabeling,
    RegionAdjacency,
    SuperpixelMap,
    build_adjacency,
    compute_superpixels,
    optimal_labels,
)
from .volume import Mask, PhantomSpec, Volume, make_phantom

log = logging.getLogger(__name__)

STAGES = ("Opt", "S_RF", "P0", "G(P0)", "P1", "G(P1)", "P2", "G(P2)", "CRF(P2)")
MAP_STAGES = ("P0", "P1", "P2")


def stage_slug(stage: str) -> str:
    """File-name form: ``G(P0)`` becomes ``G_P0``."""
    return stage.replace("(", "_").replace(")", "")


def derive_seed(*parts) -> int:
    """Deterministic 63-bit seed from integer parts."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0] >> 1)


STAGE_TAGS = {"cascade": 1, "patchnet": 2, "regionnet": 3, "edgenet": 4, "folds": 5}


@dataclass
class Case:
    case_id: str
    volume: Volume
    gt: Mask
    sp: SuperpixelMap | None = None
    _norm: np.ndarray | None = field(default=None, repr=False)
    _adj: RegionAdjacency | None = field(default=None, repr=False)
    _opt: OptimalLabeling | None = field(default=None, repr=False)

    @property
    def norm(self):
        if self._norm is None:
            self._norm = normalize_intensity(self.volume)
        return self._norm

    @property
    def adjacency(self):
        if self._adj is None:
            self._adj = build_adjacency(self.sp)
        return self._adj

    @property
    def optimal(self):
        if self._opt is None:
            self._opt = optimal_labels(self.sp, self.gt)
        return self._opt


def phantom_spec(cfg: PipelineConfig, index: int) -> PhantomSpec:
    return PhantomSpec(
        seed=cfg["phantom.seed"] + index,
        organ_count=cfg["phantom.organ_count"],
        target_fraction=cfg["phantom.target_fraction"],
        noise_sigma=cfg["phantom.noise_sigma"],
        dims=tuple(cfg["phantom.dims"]),
        spacing=tuple(cfg["phantom.spacing"]),
    )


def case_id(index: int) -> str:
    return f"case{index:03d}"


def superpixels_for(cfg: PipelineConfig, v: Volume) -> SuperpixelMap:
    return compute_superpixels(
        v,
        area_per_region=cfg["superpixel.area_per_region"],
        min_regions=cfg["superpixel.min_regions"],
        lam=cfg["superpixel.lam"],
    )


def make_cases(cfg: PipelineConfig, with_superpixels: bool = True) -> list:
    cases = []
    for i in range(cfg["phantom.count"]):
        v, gt = make_phantom(phantom_spec(cfg, i))
        c = Case(case_id(i), v, gt)
        if with_superpixels:
            c.sp = superpixels_for(cfg, v)
        cases.append(c)
    return cases


def fold_plan(cfg: PipelineConfig, ids) -> FoldPlan:
    return make_folds(ids, cfg["cv.folds"], derive_seed(cfg["run.seed"], cfg["cv.seed"], STAGE_TAGS["folds"]))


def _net_spec(cfg, channels, size, seed):
    return default_spec(
        channels,
        size,
        tuple(cfg["net.widths"]),
        tuple(cfg["net.kernels"]),
        cfg["net.fc"],
        cfg["net.dropout"],
        seed,
    )


def _train_net(cfg, channels, size, images, labels, epochs, seed, name):
    spec = _net_spec(cfg, channels, size, derive_seed(seed, 0))
    log.info("training %s on %d samples", name, len(images))
    return train_sgd(
        spec,
        images,
        labels,
        epochs=epochs,
        lr=cfg["net.lr"],
        momentum=cfg["net.momentum"],
        batch_size=cfg["net.batch_size"],
        seed=derive_seed(seed, 1),
        weight_decay=cfg["net.weight_decay"],
        log=log.debug,
    )


# --------------------------------------------------------------------------
# stage trainers; every one sees training cases only


def train_candidates(cfg, cases, seed):
    """Cascade plus the out-of-bag candidate sets of the training cases."""
    res = train_cascade(
        [c.volume for c in cases],
        [c.sp for c in cases],
        [c.gt for c in cases],
        n_trees=cfg["forest.n_trees"],
        max_depth=cfg["forest.max_depth"],
        seed=seed,
        voxels_per_class=cfg["forest.voxels_per_class"],
        cut=cfg["forest.cut"],
        recall_target=cfg["forest.recall_target"] or None,
    )
    return res.cascade, {c.case_id: cs for c, cs in zip(cases, res.candidates)}


def train_patchnet(cfg, cases, cands, seed) -> ConvNetModel:
    xs, ys = [], []
    for i, c in enumerate(cases):
        x, y, _ = build_patch_dataset(
            c.volume,
            cands[c.case_id].mask(c.sp),
            c.gt,
            cfg["patchnet.per_class_cap"],
            derive_seed(seed, 2, i),
            cfg["patchnet.size"],
            norm=c.norm,
        )
        xs.append(x)
        ys.append(y)
    return _train_net(
        cfg, 3, cfg["patchnet.size"], np.concatenate(xs), np.concatenate(ys),
        cfg["patchnet.epochs"], seed, "P-ConvNet",
    )  # fmt: skip


def run_patchnet(cfg, model, case, cand: CandidateSet) -> Volume:
    dl = DenseLabelConfig(cfg["patchnet.stride"], cfg["patchnet.size"])
    return dense_label(case.volume, cand.mask(case.sp), model, dl, norm=case.norm)


def _region_choice(cfg, case, cand, rng):
    """Balanced subset of candidate superpixels with optimal-label targets."""
    ids = np.asarray(cand.ids, dtype=np.int64)
    lab = case.optimal.labels[ids]
    k = cfg["regionnet.regions_per_class"]
    picks = []
    for cls in (1, 0):
        pool = ids[lab == cls]
        if len(pool):
            picks.append(np.sort(rng.choice(pool, min(k, len(pool)), replace=False)))
    gids = np.concatenate(picks) if picks else ids[:0]
    return gids, case.optimal.labels[gids]


def train_regionnets(cfg, cases, cands, p0s, seed):
    """R1 (CT only) and R2 (CT + P0) trained on identical regions and warps."""
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, 3)))
    scales = cfg["regionnet.scales"]
    size = cfg["regionnet.size"]
    x2, ys = [], []
    for c in cases:
        gids, labels = _region_choice(cfg, c, cands[c.case_id], rng)
        if not len(gids):
            continue
        img, y, _, _ = region_dataset(c.norm, p0s[c.case_id], c.sp, gids, labels, scales, size)
        x2.append(img)
        ys.append(y)
    imgs2 = np.concatenate(x2)
    labels = np.concatenate(ys)
    aug2, ylab, _ = augment_dataset(
        imgs2,
        labels,
        cfg["regionnet.n_t"],
        cfg["regionnet.magnitude"],
        derive_seed(seed, 4),
        cfg["regionnet.keep_original"],
    )
    aug1 = np.ascontiguousarray(aug2[:, :1])
    epochs = cfg["regionnet.epochs"]
    r1 = _train_net(cfg, 1, size, aug1, ylab, epochs, derive_seed(seed, 5), "R1-ConvNet")
    r2 = _train_net(cfg, 2, size, aug2, ylab, epochs, derive_seed(seed, 6), "R2-ConvNet")
    return r1, r2


def region_probs(cfg, model, case, cand, p0=None) -> dict:
    scores = classify_regions(model, case.norm, p0, case.sp, cand.ids, cfg["regionnet.scales"])
    p = average_scales(scores) if len(cand.ids) else np.zeros(0)
    return {int(g): float(v) for g, v in zip(cand.ids, p)}


def _edge_p0(cfg, p0):
    return p0 if cfg["edgenet.include_p0"] else None


def train_edgenet(cfg, cases, cands, p0s, seed) -> ConvNetModel:
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, 7)))
    cap = cfg["edgenet.per_class_cap"]
    xs, ys = [], []
    for c in cases:
        img, y, _ = build_edge_dataset(
            c.norm, _edge_p0(cfg, p0s[c.case_id]), c.sp, c.adjacency,
            c.optimal.labels, cands[c.case_id].ids, cfg["edgenet.size"],
        )  # fmt: skip
        for cls in (1, 0):
            pool = np.flatnonzero(y == cls)
            if len(pool):
                pick = np.sort(rng.choice(pool, min(cap, len(pool)), replace=False))
                xs.append(img[pick])
                ys.append(y[pick])
    channels = 2 if cfg["edgenet.include_p0"] else 1
    return _train_net(
        cfg, channels, cfg["edgenet.size"], np.concatenate(xs), np.concatenate(ys),
        cfg["edgenet.epochs"], derive_seed(seed, 8), "edge ConvNet",
    )  # fmt: skip


def crf_case(cfg, edge_model, case, cand, p0, p2, include_gt=False) -> CrfCase:
    local, glob, lengths = candidate_edges(case.adjacency, cand.ids)
    if len(glob):
        crops = edge_crops(case.norm, _edge_p0(cfg, p0), case.sp, glob, cfg["edgenet.size"])
        q_same = 1.0 - predict_proba(edge_model, crops)
    else:
        q_same = np.zeros(0)
    unary_map = gaussian_smooth_3d(p2, cfg["aggregate.sigma"]) if cfg["crf.smoothed_unary"] else p2
    g = case.sp.global_labels().ravel()
    sums = np.bincount(g, unary_map.data.ravel().astype(np.float64), case.sp.n_total)
    area = np.bincount(g, minlength=case.sp.n_total)
    unary = sums[cand.ids] / np.maximum(area[cand.ids], 1)
    return CrfCase(
        case.sp, np.asarray(cand.ids), unary, local, lengths, q_same,
        case.gt if include_gt else None,
    )  # fmt: skip


# --------------------------------------------------------------------------
# one fold


@dataclass
class FoldModels:
    cascade: object
    pnet: ConvNetModel
    r1: ConvNetModel
    r2: ConvNetModel
    edge: ConvNetModel
    operating_points: dict  # stage -> OperatingPoint
    lam: float
    sweeps: dict  # stage -> train sweep [(threshold, mean dsc)]
    lambda_sweep: list


@dataclass
class CaseOutputs:
    candidates: CandidateSet
    maps: dict  # "P0", "P1", "P2" -> Volume
    masks: dict = field(default_factory=dict)  # stage -> Mask


def infer_maps(cfg, models: FoldModels, case, cand) -> CaseOutputs:
    p0 = run_patchnet(cfg, models.pnet, case, cand)
    p1 = paint_voxels(case.sp, cand.ids, region_probs(cfg, models.r1, case, cand))
    p2 = paint_voxels(case.sp, cand.ids, region_probs(cfg, models.r2, case, cand, p0))
    return CaseOutputs(cand, {"P0": p0, "P1": p1, "P2": p2})


def train_fold(cfg: PipelineConfig, train: list, fold: int, seed: int):
    """Fit every stage on the training cases; returns models and training outputs."""
    s = lambda tag: derive_seed(seed, fold, STAGE_TAGS[tag])  # noqa: E731
    log.info("fold %d: cascade", fold)
    cascade, cands = train_candidates(cfg, train, s("cascade"))
    log.info("fold %d: patch network", fold)
    pnet = train_patchnet(cfg, train, cands, s("patchnet"))
    p0s = {c.case_id: run_patchnet(cfg, pnet, c, cands[c.case_id]) for c in train}
    log.info("fold %d: region networks", fold)
    r1, r2 = train_regionnets(cfg, train, cands, p0s, s("regionnet"))
    log.info("fold %d: edge network", fold)
    edge = train_edgenet(cfg, train, cands, p0s, s("edgenet"))
    models = FoldModels(cascade, pnet, r1, r2, edge, {}, 0.0, {}, [])

    outs = {}
    for c in train:
        cand = cands[c.case_id]
        p1 = paint_voxels(c.sp, cand.ids, region_probs(cfg, r1, c, cand))
        p2 = paint_voxels(c.sp, cand.ids, region_probs(cfg, r2, c, cand, p0s[c.case_id]))
        outs[c.case_id] = CaseOutputs(cand, {"P0": p0s[c.case_id], "P1": p1, "P2": p2})
    calibrate(cfg, models, train, outs)
    log.info("fold %d: CRF lambda search", fold)
    crf_cases = [
        crf_case(cfg, edge, c, outs[c.case_id].candidates, outs[c.case_id].maps["P0"],
                 outs[c.case_id].maps["P2"], include_gt=True)
        for c in train
    ]  # fmt: skip
    models.lam, models.lambda_sweep = grid_search_lambda(crf_cases, cfg["crf.lambda_grid"])
    return models, outs


def calibrate(cfg, models: FoldModels, cases, outs):
    grid = cfg["aggregate.threshold_grid"]
    sigma = cfg["aggregate.sigma"]
    gts = [c.gt for c in cases]
    for k, name in enumerate(MAP_STAGES):
        maps = [outs[c.case_id].maps[name] for c in cases]
        for stage, sg in ((name, 0.0), (f"G({name})", sigma)):
            op, sweep = calibrate_operating_point(maps, gts, k, sg, grid)
            models.operating_points[stage] = op
            models.sweeps[stage] = sweep


def segment(cfg, models: FoldModels, case, out: CaseOutputs) -> dict:
    """Binary masks of every stage for one case."""
    sigma = cfg["aggregate.sigma"]
    masks = {
        "Opt": case.optimal.paint(case.sp),
        "S_RF": out.candidates.mask(case.sp),
    }
    for name in MAP_STAGES:
        p = out.maps[name]
        masks[name] = threshold(p, models.operating_points[name])
        masks[f"G({name})"] = threshold(gaussian_smooth_3d(p, sigma), models.operating_points[f"G({name})"])
    cc = crf_case(cfg, models.edge, case, out.candidates, out.maps["P0"], out.maps["P2"])
    masks["CRF(P2)"] = cc.segment(models.lam)
    out.masks = masks
    return masks


def case_metrics(case, masks) -> dict:
    res = {}
    for stage in STAGES:
        m = masks[stage]
        d = dice(m, case.gt)
        if m.data.any() and case.gt.data.any():
            asd = surface_distance(m, case.gt, case.volume.spacing)
        else:
            asd = (float("nan"), float("nan"))
        res[stage] = (d, asd[0], asd[1])
    return res


# --------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldReport:
    fold: int
    train_ids: list
    test_ids: list
    operating_points: dict
    lam: float
    dice: dict  # stage -> DiceReport over the fold's test cases
    case_rows: list  # (fold, case, stage, dsc, asd_mean, asd_std)
    sweeps: dict  # stage -> (train sweep, test sweep)
    lambda_sweep: list
    candidate_recall: list
    leakage: set
    models: FoldModels | None = None


@dataclass
class CVResult:
    plan: FoldPlan
    folds: list
    pooled: dict  # stage -> DiceReport over all test cases

    def reports(self) -> dict:
        out = {"pooled": self.pooled}
        for f in self.folds:
            out[f"fold{f.fold}"] = f.dice
        return out

    def sweeps(self) -> dict:
        return {(f.fold, stage_slug(st)): sw for f in self.folds for st, sw in f.sweeps.items()}

    def case_rows(self) -> list:
        return [r for f in self.folds for r in f.case_rows]


def run_fold(cfg, cases, plan: FoldPlan, fold: int, keep_models: bool = True) -> FoldReport:
    by_id = {c.case_id: c for c in cases}
    train_ids, test_ids = plan.train_ids(fold), plan.test_ids(fold)
    leak = leakage_audit(train_ids, test_ids)
    if leak:
        raise RuntimeError(f"fold {fold}: train/test overlap")
    train = [by_id[i] for i in train_ids]
    test = [by_id[i] for i in test_ids]
    if not any(c.gt.data.any() for c in train):
        raise ValueError(f"fold {fold}: no positive voxels among training cases")
    models, _ = train_fold(cfg, train, fold, cfg["run.seed"])

    per_stage = {s: [] for s in STAGES}
    rows, recalls, test_maps = [], [], {s: [] for s in MAP_STAGES}
    for c in test:
        cand = apply_cascade(models.cascade, c.volume, c.sp, c.gt)
        recalls.append(cand.recall)
        out = infer_maps(cfg, models, c, cand)
        for s in MAP_STAGES:
            test_maps[s].append(out.maps[s])
        masks = segment(cfg, models, c, out)
        for stage, (d, am, asd) in case_metrics(c, masks).items():
            per_stage[stage].append(d)
            rows.append((fold, c.case_id, stage, d, am, asd))
    sweeps = {}
    for s in MAP_STAGES:
        for stage, sg in ((s, 0.0), (f"G({s})", cfg["aggregate.sigma"])):
            test_sweep = threshold_sweep(
                test_maps[s], [c.gt for c in test], cfg["aggregate.threshold_grid"], sg
            )
            sweeps[stage] = (models.sweeps[stage], test_sweep)
    return FoldReport(
        fold,
        train_ids,
        test_ids,
        dict(models.operating_points),
        models.lam,
        {s: DiceReport(v, test_ids) for s, v in per_stage.items()},
        rows,
        sweeps,
        models.lambda_sweep,
        recalls,
        leak,
        models if keep_models else None,
    )


def cross_validate(cfg: PipelineConfig, cases=None, plan: FoldPlan | None = None) -> CVResult:
    if cases is None:
        cases = make_cases(cfg)
    if plan is None:
        plan = fold_plan(cfg, [c.case_id for c in cases])
    if plan.n_folds < 2:
        raise ValueError("cross-validation needs at least 2 folds")
    folds = [run_fold(cfg, cases, plan, k) for k in range(plan.n_folds)]
    pooled = {}
    for stage in STAGES:
        vals, ids = [], []
        for f in folds:
            vals.extend(f.dice[stage].values.tolist())
            ids.extend(f.test_ids)
        pooled[stage] = DiceReport(vals, ids)
    return CVResult(plan, folds, pooled)


def operating_points_table(folds) -> list:
    """Rows ``(fold, stage, map_id, threshold, sigma)`` plus CRF lambda rows."""
    rows = []
    for f in folds:
        for stage, op in sorted(f.operating_points.items()):
            rows.append((f.fold, stage, op.map_id, op.threshold, op.sigma))
        rows.append((f.fold, "CRF(P2)", 2, f.lam, float("nan")))
    return rows


__all__ = [
    "STAGES",
    "Case",
    "CVResult",
    "FoldModels",
    "FoldReport",
    "OperatingPoint",
    "cross_validate",
    "make_cases",
    "run_fold",
    "train_fold",
]
