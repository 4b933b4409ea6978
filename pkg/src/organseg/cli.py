"""Command-line entry point: staged pipeline runs over a work directory.

The staged commands train on the training split of fold 0 of the fold plan
and evaluate on its test split; ``cv`` runs every fold in one go. Each stage
writes a manifest with the SHA-256 of its inputs and outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .aggregate import OperatingPoint, paint_voxels
from .candidates import Cascade, CandidateSet, apply_cascade
from .config import ConfigError, PipelineConfig, validate_config
from .convnet import first_layer_pgm, load_model, save_model
from .crf import grid_search_lambda
from .eval import DiceReport, emit_report, leakage_audit
from .forest import load_forest, save_forest
from .superpixel import SuperpixelMap
from .volume import read_mask, read_volume, write_volume

STAGE_NAMES = (
    "phantom",
    "superpixels",
    "candidates",
    "train-patchnet",
    "train-regionnet",
    "train-edgenet",
    "infer",
    "crf",
    "eval",
    "cv",
)

log = logging.getLogger("organseg")


class MissingInputError(FileNotFoundError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _json_dump(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _json_load(path):
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"missing input {p}; run the producing stage first")
    return json.loads(p.read_text(encoding="utf-8"))


class Workdir:
    def __init__(self, root):
        self.root = Path(root)

    def case_dir(self, cid) -> Path:
        return self.root / "cases" / cid

    def case_file(self, cid, name) -> Path:
        return self.case_dir(cid) / name

    def need(self, path) -> Path:
        if not Path(path).exists():
            raise MissingInputError(f"missing input {path}; run the producing stage first")
        return Path(path)

    def rel(self, path) -> str:
        return Path(path).resolve().relative_to(self.root.resolve()).as_posix()

    def files(self, paths) -> dict:
        out = {}
        for p in paths:
            p = Path(p)
            out[self.rel(p)] = sha256_file(p)
            if p.suffix == ".mhd":
                raw = p.with_suffix(".raw")
                out[self.rel(raw)] = sha256_file(raw)
        return out

    def write_manifest(self, stage, cfg, inputs, outputs):
        man = {
            "stage": stage,
            "config_sha256": cfg.digest(),
            "seed": cfg["run.seed"],
            "inputs": self.files(inputs),
            "outputs": self.files(outputs),
        }
        (self.root / "manifests").mkdir(parents=True, exist_ok=True)
        _json_dump(man, self.root / "manifests" / f"{stage}.json")
        return man


# --------------------------------------------------------------------------
# loading helpers


def _split(wd: Workdir):
    s = _json_load(wd.root / "split.json")
    return s["train"], s["test"]


def _load_case(wd: Workdir, cid, need_sp=True) -> pl.Case:
    v = read_volume(wd.need(wd.case_file(cid, "ct.mhd")))
    gt = read_mask(wd.need(wd.case_file(cid, "gt.mhd")))
    c = pl.Case(cid, v, gt)
    if need_sp:
        c.sp = SuperpixelMap.from_volume(read_volume(wd.need(wd.case_file(cid, "sp.mhd"))))
    return c


def _all_ids(wd):
    tr, te = _split(wd)
    return tr + te


def _load_candidates(wd, cid) -> CandidateSet:
    d = _json_load(wd.case_file(cid, "candidates.json"))
    return CandidateSet(np.asarray(d["ids"], dtype=np.int64), d["cut"], d["recall"], d["dsc"])


def _load_map(wd, cid, name):
    return read_volume(wd.need(wd.case_file(cid, f"{name}.mhd")))


# --------------------------------------------------------------------------
# stages


def stage_phantom(cfg, wd: Workdir):
    outs = []
    ids = []
    for i in range(cfg["phantom.count"]):
        cid = pl.case_id(i)
        v, gt = pl.make_phantom(pl.phantom_spec(cfg, i))
        d = wd.case_dir(cid)
        d.mkdir(parents=True, exist_ok=True)
        write_volume(v, d / "ct.mhd")
        write_volume(gt, d / "gt.mhd")
        outs += [d / "ct.mhd", d / "gt.mhd"]
        ids.append(cid)
    plan = pl.fold_plan(cfg, ids)
    split = {"train": plan.train_ids(0), "test": plan.test_ids(0)}
    _json_dump(split, wd.root / "split.json")
    outs.append(wd.root / "split.json")
    return [], outs


def stage_superpixels(cfg, wd):
    ins, outs = [], []
    for cid in _all_ids(wd):
        ct = wd.need(wd.case_file(cid, "ct.mhd"))
        sp = pl.superpixels_for(cfg, read_volume(ct))
        write_volume(sp.to_volume(), wd.case_file(cid, "sp.mhd"))
        ins.append(ct)
        outs.append(wd.case_file(cid, "sp.mhd"))
    return ins, outs


def _stage_seed(cfg, tag):
    return pl.derive_seed(cfg["run.seed"], 0, pl.STAGE_TAGS[tag])


def _case_inputs(wd, ids, names=("ct.mhd", "gt.mhd", "sp.mhd")):
    return [wd.case_file(c, n) for c in ids for n in names]


def stage_candidates(cfg, wd):
    train_ids, test_ids = _split(wd)
    train = [_load_case(wd, c) for c in train_ids]
    cascade, cands = pl.train_candidates(cfg, train, _stage_seed(cfg, "cascade"))
    mdir = wd.root / "models"
    mdir.mkdir(exist_ok=True)
    save_forest(cascade.level1, mdir / "level1.rfst")
    save_forest(cascade.level2, mdir / "level2.rfst")
    _json_dump({"cut": cascade.cut, "level1_cut": cascade.level1_cut}, mdir / "cascade.json")
    for cid in test_ids:
        c = _load_case(wd, cid)
        cands[cid] = apply_cascade(cascade, c.volume, c.sp, c.gt)
    outs = [mdir / "level1.rfst", mdir / "level2.rfst", mdir / "cascade.json"]
    for cid, cs in cands.items():
        p = wd.case_file(cid, "candidates.json")
        _json_dump(
            {"ids": [int(i) for i in cs.ids], "cut": cs.cut, "recall": cs.recall, "dsc": cs.dsc}, p
        )
        outs.append(p)
    return _case_inputs(wd, train_ids + test_ids), outs


def _load_cascade(wd):
    meta = _json_load(wd.root / "models" / "cascade.json")
    return Cascade(
        load_forest(wd.need(wd.root / "models" / "level1.rfst")),
        load_forest(wd.need(wd.root / "models" / "level2.rfst")),
        meta["cut"],
        meta["level1_cut"],
    )


def stage_train_patchnet(cfg, wd):
    train_ids, test_ids = _split(wd)
    train = [_load_case(wd, c) for c in train_ids]
    cands = {c: _load_candidates(wd, c) for c in train_ids + test_ids}
    model = pl.train_patchnet(cfg, train, cands, _stage_seed(cfg, "patchnet"))
    mp = wd.root / "models" / "pnet.cnvn"
    save_model(model, mp)
    (wd.root / "models" / "pnet_filters.pgm").write_bytes(first_layer_pgm(model))
    outs = [mp, wd.root / "models" / "pnet_filters.pgm"]
    for cid in train_ids + test_ids:
        c = train[train_ids.index(cid)] if cid in train_ids else _load_case(wd, cid)
        p0 = pl.run_patchnet(cfg, model, c, cands[cid])
        write_volume(p0, wd.case_file(cid, "p0.mhd"))
        outs.append(wd.case_file(cid, "p0.mhd"))
    ins = _case_inputs(wd, train_ids + test_ids) + [
        wd.case_file(c, "candidates.json") for c in train_ids + test_ids
    ]
    return ins, outs


def stage_train_regionnet(cfg, wd):
    from .regionnet import RegionSample, region_dataset, save_records

    train_ids, _ = _split(wd)
    train = [_load_case(wd, c) for c in train_ids]
    cands = {c: _load_candidates(wd, c) for c in train_ids}
    p0s = {c: _load_map(wd, c, "p0") for c in train_ids}
    r1, r2 = pl.train_regionnets(cfg, train, cands, p0s, _stage_seed(cfg, "regionnet"))
    mdir = wd.root / "models"
    save_model(r1, mdir / "r1.cnvn")
    save_model(r2, mdir / "r2.cnvn")
    # unaugmented two-channel training crops, for inspection and reuse
    recs = []
    for c in train:
        ids = cands[c.case_id].ids
        imgs, ys, gids, si = region_dataset(
            c.norm, p0s[c.case_id], c.sp, ids, c.optimal.labels[ids],
            cfg["regionnet.scales"], cfg["regionnet.size"],
        )  # fmt: skip
        recs += [RegionSample(int(g), int(s), im, int(y)) for im, y, g, s in zip(imgs, ys, gids, si)]
    save_records(recs, mdir / "regions.rgns")
    ins = _case_inputs(wd, train_ids) + [wd.case_file(c, n) for c in train_ids for n in ("candidates.json", "p0.mhd")]
    return ins, [mdir / "r1.cnvn", mdir / "r2.cnvn", mdir / "regions.rgns"]


def stage_train_edgenet(cfg, wd):
    train_ids, _ = _split(wd)
    train = [_load_case(wd, c) for c in train_ids]
    cands = {c: _load_candidates(wd, c) for c in train_ids}
    p0s = {c: _load_map(wd, c, "p0") for c in train_ids}
    edge = pl.train_edgenet(cfg, train, cands, p0s, _stage_seed(cfg, "edgenet"))
    save_model(edge, wd.root / "models" / "edge.cnvn")
    ins = _case_inputs(wd, train_ids) + [wd.case_file(c, n) for c in train_ids for n in ("candidates.json", "p0.mhd")]
    return ins, [wd.root / "models" / "edge.cnvn"]


def _load_models(wd, with_calibration=False):
    m = wd.root / "models"
    fm = pl.FoldModels(
        _load_cascade(wd),
        load_model(wd.need(m / "pnet.cnvn")),
        load_model(wd.need(m / "r1.cnvn")),
        load_model(wd.need(m / "r2.cnvn")),
        load_model(wd.need(m / "edge.cnvn")),
        {},
        0.0,
        {},
        [],
    )
    if with_calibration:
        cal = _json_load(wd.root / "calibration.json")
        fm.operating_points = {
            k: OperatingPoint(v["map_id"], v["threshold"], v["sigma"]) for k, v in cal["operating_points"].items()
        }
        fm.lam = cal.get("lambda", 0.0)
    return fm


def stage_infer(cfg, wd):
    from .eval import write_sweep_csv

    train_ids, test_ids = _split(wd)
    fm = _load_models(wd)
    outs_by_case = {}
    cases = {}
    outs = []
    for cid in train_ids + test_ids:
        c = _load_case(wd, cid)
        cases[cid] = c
        cand = _load_candidates(wd, cid)
        p0 = _load_map(wd, cid, "p0")
        p1 = paint_voxels(c.sp, cand.ids, pl.region_probs(cfg, fm.r1, c, cand))
        p2 = paint_voxels(c.sp, cand.ids, pl.region_probs(cfg, fm.r2, c, cand, p0))
        for name, vol in (("p1", p1), ("p2", p2)):
            write_volume(vol, wd.case_file(cid, f"{name}.mhd"))
            outs.append(wd.case_file(cid, f"{name}.mhd"))
        outs_by_case[cid] = pl.CaseOutputs(cand, {"P0": p0, "P1": p1, "P2": p2})
    pl.calibrate(cfg, fm, [cases[c] for c in train_ids], outs_by_case)
    cal = {
        "operating_points": {
            k: {"map_id": op.map_id, "threshold": op.threshold, "sigma": op.sigma}
            for k, op in sorted(fm.operating_points.items())
        },
        "lambda": 0.0,
        "train_ids": train_ids,
    }
    _json_dump(cal, wd.root / "calibration.json")
    rep = wd.root / "reports"
    rep.mkdir(exist_ok=True)
    for stage, sweep in sorted(fm.sweeps.items()):
        p = rep / f"sweep_train_{pl.stage_slug(stage)}.csv"
        write_sweep_csv(p, sweep, [])
        outs.append(p)
    outs.append(wd.root / "calibration.json")
    ins = _case_inputs(wd, train_ids + test_ids) + [
        wd.case_file(c, n) for c in train_ids + test_ids for n in ("candidates.json", "p0.mhd")
    ]
    ins += [wd.root / "models" / n for n in ("r1.cnvn", "r2.cnvn")]
    return ins, outs


def stage_crf(cfg, wd):
    train_ids, test_ids = _split(wd)
    fm = _load_models(wd, with_calibration=True)
    crf_cases = {}
    for cid in train_ids + test_ids:
        c = _load_case(wd, cid)
        cand = _load_candidates(wd, cid)
        crf_cases[cid] = pl.crf_case(
            cfg, fm.edge, c, cand, _load_map(wd, cid, "p0"), _load_map(wd, cid, "p2"),
            include_gt=cid in train_ids,
        )  # fmt: skip
    lam, sweep = grid_search_lambda([crf_cases[c] for c in train_ids], cfg["crf.lambda_grid"])
    cal = _json_load(wd.root / "calibration.json")
    cal["lambda"] = lam
    _json_dump(cal, wd.root / "calibration.json")
    rep = wd.root / "reports"
    rep.mkdir(exist_ok=True)
    with open(rep / "lambda_sweep.csv", "w", encoding="utf-8", newline="") as f:
        f.write("lambda,mean_dsc_train\n")
        for l, d in sweep:
            f.write(f"{l!r},{d!r}\n")
    outs = [wd.root / "calibration.json", rep / "lambda_sweep.csv"]
    for cid, cc in crf_cases.items():
        write_volume(cc.segment(lam), wd.case_file(cid, "crf.mhd"))
        outs.append(wd.case_file(cid, "crf.mhd"))
    ins = _case_inputs(wd, train_ids + test_ids) + [wd.root / "models" / "edge.cnvn"]
    ins += [wd.case_file(c, n) for c in train_ids + test_ids for n in ("candidates.json", "p0.mhd", "p2.mhd")]
    return ins, outs


def stage_eval(cfg, wd):
    train_ids, test_ids = _split(wd)
    if leakage_audit(train_ids, test_ids):
        raise RuntimeError("train/test overlap in split.json")
    fm = _load_models(wd, with_calibration=True)
    per_stage = {s: [] for s in pl.STAGES}
    rows = []
    for cid in test_ids:
        c = _load_case(wd, cid)
        cand = _load_candidates(wd, cid)
        out = pl.CaseOutputs(cand, {k: _load_map(wd, cid, k.lower()) for k in pl.MAP_STAGES})
        masks = pl.segment(cfg, fm, c, out)
        masks["CRF(P2)"] = read_mask(wd.need(wd.case_file(cid, "crf.mhd")))
        for stage, (d, am, asd) in pl.case_metrics(c, masks).items():
            per_stage[stage].append(d)
            rows.append((0, cid, stage, d, am, asd))
    reports = {"test": {s: DiceReport(v, test_ids) for s, v in per_stage.items()}}
    written = emit_report(reports, wd.root / "reports" / "eval", cases=rows)
    ins = _case_inputs(wd, test_ids) + [wd.root / "calibration.json"]
    ins += [wd.case_file(c, n) for c in test_ids for n in ("candidates.json", "p0.mhd", "p1.mhd", "p2.mhd", "crf.mhd")]
    return ins, written


def write_cv_outputs(result: pl.CVResult, out_dir, save_models: bool = True) -> list:
    """Reports (summary, per-case, sweeps, operating points) and fold models."""
    out_dir = Path(out_dir)
    written = emit_report(result.reports(), out_dir / "reports", result.sweeps(), result.case_rows())
    p = out_dir / "reports" / "operating_points.csv"
    with open(p, "w", encoding="utf-8", newline="") as f:
        f.write("fold,stage,map_id,threshold,sigma\n")
        for fold, stage, mid, t, s in pl.operating_points_table(result.folds):
            f.write(f"{fold},{stage},{mid},{t!r},{s!r}\n")
    written.append(p)
    p = out_dir / "reports" / "lambda_sweep.csv"
    with open(p, "w", encoding="utf-8", newline="") as f:
        f.write("fold,lambda,mean_dsc_train\n")
        for fr in result.folds:
            for l, d in fr.lambda_sweep:
                f.write(f"{fr.fold},{l!r},{d!r}\n")
    written.append(p)
    p = out_dir / "reports" / "candidates.csv"
    with open(p, "w", encoding="utf-8", newline="") as f:
        f.write("fold,case,recall\n")
        for fr in result.folds:
            for cid, r in zip(fr.test_ids, fr.candidate_recall):
                f.write(f"{fr.fold},{cid},{r!r}\n")
    written.append(p)
    p = out_dir / "reports" / "folds.json"
    _json_dump(
        {
            f"fold{fr.fold}": {
                "train": fr.train_ids,
                "test": fr.test_ids,
                "leakage": sorted(fr.leakage),
            }
            for fr in result.folds
        },
        p,
    )
    written.append(p)
    if save_models:
        for fr in result.folds:
            m = fr.models
            d = out_dir / "models" / f"fold{fr.fold}"
            d.mkdir(parents=True, exist_ok=True)
            save_forest(m.cascade.level1, d / "level1.rfst")
            save_forest(m.cascade.level2, d / "level2.rfst")
            for name in ("pnet", "r1", "r2", "edge"):
                save_model(getattr(m, name), d / f"{name}.cnvn")
                written.append(d / f"{name}.cnvn")
            written += [d / "level1.rfst", d / "level2.rfst"]
    return written


def stage_cv(cfg, wd):
    result = pl.cross_validate(cfg)
    written = write_cv_outputs(result, wd.root / "cv")
    for stage in pl.STAGES:
        rep = result.pooled[stage]
        log.info("%-8s mean DSC %.3f +- %.3f", stage, rep.mean, rep.std)
    return [], written


STAGE_FUNCS = {
    "phantom": stage_phantom,
    "superpixels": stage_superpixels,
    "candidates": stage_candidates,
    "train-patchnet": stage_train_patchnet,
    "train-regionnet": stage_train_regionnet,
    "train-edgenet": stage_train_edgenet,
    "infer": stage_infer,
    "crf": stage_crf,
    "eval": stage_eval,
    "cv": stage_cv,
}


def run_stage(stage: str, cfg: PipelineConfig, workdir) -> dict:
    """Run one stage and return its manifest."""
    if stage not in STAGE_FUNCS:
        raise ValueError(f"unknown stage {stage!r}")
    wd = Workdir(workdir)
    wd.root.mkdir(parents=True, exist_ok=True)
    (wd.root / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    ins, outs = STAGE_FUNCS[stage](cfg, wd)
    return wd.write_manifest(stage, cfg, ins, outs)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="organseg", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="stage", required=True)
    for name in STAGE_NAMES:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, default=None, help="config file (key = value)")
        sp.add_argument("--workdir", type=Path, default=Path("work"))
        sp.add_argument("--seed", type=int, default=None, help="override run.seed")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = validate_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_values({"run.seed": args.seed})
    except (ConfigError, OSError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    log.info("effective configuration:\n%s", cfg.to_text().rstrip())
    try:
        man = run_stage(args.stage, cfg, args.workdir)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - report and map to exit code 1
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(f"{args.stage}: wrote {len(man['outputs'])} files to {args.workdir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
