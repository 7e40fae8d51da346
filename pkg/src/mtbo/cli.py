"""Command-line entry point: ``mtbo <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .bo import BOAborted, MTBOConfig, mtbo_run, stbo_run, write_trace_csv
from .discretize import discretize, strategy_grid
from .errors import MTBOError
from .radiomics import FEATURE_NAMES, extract_all
from .svm import CVConfig, SVMHyperparams, cross_validate, read_dataset_csv, write_dataset_csv
from .volio import read_mask, read_volume, write_mask, write_raw, write_volume


def _strategy(index: int):
    grid = strategy_grid()
    if not 0 <= index < len(grid):
        raise SystemExit(f"strategy index must be in 0..{len(grid) - 1}")
    return grid[index]


def cmd_discretize(a) -> int:
    vol, mask = read_volume(a.volume), read_mask(a.mask)
    s = _strategy(a.strategy_index)
    roi = discretize(vol, mask, s)
    write_raw(a.out, roi.level_grid().astype(np.uint16), "u16", vol.spacing, extra={
        "q0": roi.q0, "qN": roi.qN, "N_g": s.num_bins, "strategy_index": a.strategy_index, "strategy": s.label(),
    })
    return 0


def cmd_extract(a) -> int:
    vol, mask = read_volume(a.volume), read_mask(a.mask)
    indices = range(len(strategy_grid())) if a.all_strategies else [a.strategy_index]
    case_id = a.case_id or Path(a.volume).stem
    with open(a.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "strategy_index", *FEATURE_NAMES])
        for i in indices:
            fv = extract_all(vol, mask, _strategy(i))
            w.writerow([case_id, i, *(repr(float(v)) for v in fv.values)])
            for name, why in fv.errors.items():
                print(f"warning: strategy {i}: {name} undefined ({why})", file=sys.stderr)
    return 0


def cmd_cv_loss(a) -> int:
    data = read_dataset_csv(a.data)
    res = cross_validate(data, SVMHyperparams(a.c, a.gamma), CVConfig(k=a.folds, seed=a.seed))
    print(json.dumps({"loss": res.loss, "errors": res.n_errors, "flags": list(res.flags)}))
    return 0


def cmd_phantom_gen(a) -> int:
    spec = harness.PhantomSpec(n_cases=a.n_cases, dims=tuple(a.dims), radius_range=(a.radius_min, a.radius_max),
                               class_effect=a.effect, noise_sd=a.noise_sd, seed=a.seed)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    cases = harness.gen_phantom(spec)
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "label", "volume", "mask"])
        for cid, (vol, mask, label) in zip(harness.case_ids(len(cases)), cases):
            write_volume(out / f"{cid}_vol.json", vol)
            write_mask(out / f"{cid}_mask.json", mask, vol.spacing)
            w.writerow([cid, label, f"{cid}_vol.json", f"{cid}_mask.json"])
    return 0


def _read_manifest(path):
    path = Path(path)
    manifest = path / "manifest.csv" if path.is_dir() else path
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    base = manifest.parent
    cases = [(read_volume(base / r["volume"]), read_mask(base / r["mask"]), int(r["label"])) for r in rows]
    return cases, [r["case_id"] for r in rows]


def cmd_build_datasets(a) -> int:
    cases, ids = _read_manifest(a.phantoms)
    datasets, rejected = harness.build_datasets(cases, ids=ids)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for m, (d, s) in enumerate(zip(datasets, strategy_grid()), start=1):
        write_dataset_csv(out / f"dataset_{m}.csv", d)
    (out / "strategies.json").write_text(json.dumps([s.label() for s in strategy_grid()], indent=2))
    with open(out / "rejected.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "strategy", "reason"])
        for r in rejected:
            w.writerow([r.case_id, r.strategy, r.reason])
    print(f"{len(datasets)} datasets, {len(datasets[0]) if datasets else 0} cases, {len(rejected)} rejections")
    return 0


def cmd_landscape(a) -> int:
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cv = CVConfig(k=a.folds, seed=a.seed)
    for t, path in enumerate(a.datasets, start=1):
        grid = harness.eval_landscape(read_dataset_csv(path), cv, a.grid_side)
        grid.write_csv(out / f"landscape_task{t}.csv", t)
    return 0


def _config(a, M: int) -> MTBOConfig:
    return MTBOConfig(iter1=a.iter1, iter2=a.iter2, folds=a.folds, seed=a.seed, inference=a.inference,
                      per_task_best=a.per_task_best, record_timing=not a.no_timing)


def cmd_tune(a) -> int:
    datasets = [read_dataset_csv(p) for p in a.datasets]
    M = len(datasets)
    cfg = _config(a, M)
    cv = CVConfig(k=cfg.folds, seed=cfg.seed)
    objectives = [harness.dataset_objective(d, cv) for d in datasets]
    try:
        if a.mode == "mtbo":
            trace = mtbo_run(objectives, cfg).trace
        else:
            per_task = cfg.iter1 + -(-(cfg.iter2 - cfg.iter1) // M)
            trace = []
            for t, obj in enumerate(objectives, start=1):
                try:
                    trace += stbo_run(obj, per_task, seed=cfg.seed, task=t, cfg=cfg)
                except BOAborted as exc:
                    raise BOAborted(str(exc), trace + exc.trace) from exc
    except BOAborted as exc:
        write_trace_csv(a.out, exc.trace)
        print(f"aborted: {exc}; partial trace written", file=sys.stderr)
        return 2
    write_trace_csv(a.out, trace)
    return 0


def cmd_report(a) -> int:
    M = len(a.datasets)
    cfg = _config(a, M)
    landscapes = None
    if a.landscapes:
        landscapes = [harness.LandscapeGrid.read_csv(Path(a.landscapes) / f"landscape_task{t}.csv")
                      for t in range(1, M + 1)]
    if a.traces:
        stbo, mt = harness.load_traces(a.traces, M)
        report = harness.build_report(stbo, mt, M, cfg, landscapes)
    else:
        report = harness.compare_runs([read_dataset_csv(p) for p in a.datasets], cfg, landscapes,
                                      compare_inference=a.compare_inference)
    path = report.write(a.out_dir)
    if landscapes:
        for t, g in enumerate(landscapes, start=1):
            g.write_csv(Path(a.out_dir) / f"landscape_task{t}.csv", t)
    print(path)
    return 0 if not report.failures else 3


def _add_bo_args(p):
    p.add_argument("--datasets", nargs="+", required=True)
    p.add_argument("--iter1", type=int, default=10)
    p.add_argument("--iter2", type=int, default=190)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inference", choices=("exact", "impute"), default="exact")
    p.add_argument("--per-task-best", action="store_true", help="EI incumbent per task instead of global")
    p.add_argument("--no-timing", action="store_true", help="write wall_time_ms as 0 (byte-stable traces)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mtbo", description="Multi-task BO for radiomics SVM tuning")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("discretize", help="write the level grid of one ROI")
    p.add_argument("--volume", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--strategy-index", type=int, required=True)
    p.add_argument("--out", required=True, help="header path; levels go to the sibling .raw")
    p.set_defaults(fn=cmd_discretize)

    p = sub.add_parser("extract", help="48 features per strategy for one ROI")
    p.add_argument("--volume", required=True)
    p.add_argument("--mask", required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--all-strategies", action="store_true")
    g.add_argument("--strategy-index", type=int)
    p.add_argument("--case-id")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("cv-loss", help="k-fold CV loss of an RBF SVM")
    p.add_argument("--data", required=True)
    p.add_argument("--c", type=float, required=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_cv_loss)

    p = sub.add_parser("phantom-gen", help="synthetic two-class nodule volumes")
    p.add_argument("--out", required=True)
    p.add_argument("--n-cases", type=int, default=60)
    p.add_argument("--dims", type=int, nargs=3, default=(24, 24, 24))
    p.add_argument("--radius-min", type=float, default=5.0)
    p.add_argument("--radius-max", type=float, default=8.0)
    p.add_argument("--effect", type=float, default=0.35)
    p.add_argument("--noise-sd", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_phantom_gen)

    p = sub.add_parser("build-datasets", help="one feature CSV per discretization strategy")
    p.add_argument("--phantoms", required=True, help="directory with manifest.csv")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_build_datasets)

    p = sub.add_parser("landscape", help="CV loss over the full hyperparameter grid")
    p.add_argument("--datasets", nargs="+", required=True)
    p.add_argument("--grid-side", type=int, default=61)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_landscape)

    p = sub.add_parser("tune", help="run STBO or MTBO and write the trace")
    p.add_argument("--mode", choices=("stbo", "mtbo"), default="mtbo")
    _add_bo_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_tune)

    p = sub.add_parser("report", help="STBO vs MTBO report (runs both unless --traces is given)")
    _add_bo_args(p)
    p.add_argument("--traces", help="directory with stbo_task<t>.csv and mtbo.csv to project instead of running")
    p.add_argument("--landscapes", help="directory with landscape_task<t>.csv for RMSE and thresholds")
    p.add_argument("--compare-inference", action="store_true", help="also run MTBO with imputation")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (MTBOError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
