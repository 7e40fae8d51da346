"""Experiment orchestration: phantoms, datasets, landscapes and STBO/MTBO comparisons.

Worker pools are sized by the ``MTBO_THREADS`` environment variable
(default: logical core count).  Every result is independent of the pool
size.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .bo import (
    BOAborted, MTBOConfig, TraceRecord, best_so_far, mtbo_run, optima_from_trace, read_trace_csv, stbo_run,
    write_trace_csv,
)
from .discretize import DiscretizationStrategy, IntensityVolume, VoxelMask, strategy_grid
from .errors import DegenerateRange, FitFailure
from .mtgp import BOX, Observation, ObservationSet, fit
from .radiomics import FEATURE_NAMES, extract_all
from .svm import CVConfig, Dataset, SVMHyperparams, cross_validate, inverse_transform, transform_loss

THRESHOLD_REL = 0.05


def num_workers() -> int:
    env = os.environ.get("MTBO_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _pmap(fn, items) -> list:
    items = list(items)
    n = min(num_workers(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# phantoms


@dataclass(frozen=True)
class PhantomSpec:
    """Synthetic two-class nodule population.

    Class -1 nodules carry smooth Gaussian texture; class +1 nodules get
    extra speckle and a mean shift, both proportional to `class_effect`.
    """

    n_cases: int = 60
    dims: tuple[int, int, int] = (24, 24, 24)
    radius_range: tuple[float, float] = (5.0, 8.0)
    class_effect: float = 0.35
    noise_sd: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.n_cases < 20:
            raise ValueError("n_cases must be at least 20")
        lo, hi = self.radius_range
        if not 1 <= lo <= hi or 2 * hi + 2 > min(self.dims):
            raise ValueError("radius range does not fit the grid")


_BASE_INTENSITY = 100.0
_TEXTURE_SD = 15.0
_SHIFT = 10.0
_SPECKLE_SD = 10.0


def case_ids(n: int) -> tuple[str, ...]:
    return tuple(f"case_{i:03d}" for i in range(n))


def phantom_labels(spec: PhantomSpec) -> np.ndarray:
    labels = np.resize(np.array([-1, 1]), spec.n_cases)
    return labels[np.random.default_rng([spec.seed, 0]).permutation(spec.n_cases)]


def _phantom_case(spec: PhantomSpec, i: int, label: int) -> tuple[IntensityVolume, VoxelMask, int]:
    rng = np.random.default_rng([spec.seed, 1, i])
    dims = np.array(spec.dims)
    radius = rng.uniform(*spec.radius_range)
    centre = (dims - 1) / 2 + rng.uniform(-1.0, 1.0, 3)
    grid = np.indices(spec.dims, dtype=np.float64)
    dist = np.sqrt(sum((g - c) ** 2 for g, c in zip(grid, centre)))
    inside = dist <= radius

    texture = gaussian_filter(rng.standard_normal(spec.dims), sigma=1.5)
    texture /= texture.std()
    noise = rng.standard_normal(spec.dims)
    speckle = rng.standard_normal(spec.dims)
    lesion = _BASE_INTENSITY + _TEXTURE_SD * texture
    if label == 1:
        lesion = lesion + spec.class_effect * (_SHIFT + _SPECKLE_SD * speckle)
    data = np.where(inside, lesion, 0.0) + spec.noise_sd * noise
    data = data.astype(np.float32).astype(np.float64)
    return IntensityVolume(data), VoxelMask(inside), int(label)


def gen_phantom(spec: PhantomSpec) -> list[tuple[IntensityVolume, VoxelMask, int]]:
    """Cases in id order; each case draws from its own seeded stream."""
    labels = phantom_labels(spec)
    return _pmap(lambda i: _phantom_case(spec, i, labels[i]), range(spec.n_cases))


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class Rejection:
    case_id: str
    strategy: str
    reason: str


def build_datasets(cases, strategies: Sequence[DiscretizationStrategy] | None = None,
                   ids: Sequence[str] | None = None) -> tuple[list[Dataset], list[Rejection]]:
    """One feature matrix per strategy, over the same surviving cases.

    A case is dropped from every dataset if any strategy leaves a feature
    undefined or cannot discretize its ROI.
    """
    strategies = list(strategies or strategy_grid())
    cases = list(cases)
    ids = tuple(ids) if ids is not None else case_ids(len(cases))

    def one(i):
        vol, mask, _ = cases[i]
        rows, rej = [], []
        for s in strategies:
            try:
                fv = extract_all(vol, mask, s)
            except DegenerateRange as exc:
                rej.append(Rejection(ids[i], s.label(), f"DegenerateRange: {exc}"))
                continue
            if not fv.complete:
                bad = ", ".join(sorted(fv.errors))
                rej.append(Rejection(ids[i], s.label(), f"undefined features: {bad}"))
            rows.append(fv.values)
        return rows, rej

    results = _pmap(one, range(len(cases)))
    rejected = [r for _, rej in results for r in rej]
    keep = [i for i, (_, rej) in enumerate(results) if not rej]
    labels = np.array([cases[i][2] for i in keep])
    datasets = [
        Dataset(np.array([results[i][0][m] for i in keep]).reshape(len(keep), len(FEATURE_NAMES)), labels,
                tuple(ids[i] for i in keep), FEATURE_NAMES)
        for m in range(len(strategies))
    ]
    return datasets, rejected


def dataset_objective(data: Dataset, cv: CVConfig) -> Callable:
    """BO objective: CV loss at a ``(log10 C, log10 gamma)`` point, with flags."""

    def objective(x):
        res = cross_validate(data, SVMHyperparams.from_log10(x), cv)
        return res.loss, res.flags

    return objective


# ---------------------------------------------------------------------------
# synthetic tasks


def _two_well(X: np.ndarray) -> np.ndarray:
    # broad shallow well around the start point, narrower global well up-left
    a = np.array([0.5, -0.5])
    b = np.array([-1.8, 1.8])
    da = np.sum((X - a) ** 2, axis=-1)
    db = np.sum((X - b) ** 2, axis=-1)
    return 0.55 - 0.15 * np.exp(-da / (2 * 1.5 ** 2)) - 0.35 * np.exp(-db / (2 * 0.6 ** 2))


def _ripple(X: np.ndarray) -> np.ndarray:
    return 0.1 * np.sin(1.3 * X[..., 0] + 0.5) * np.cos(0.9 * X[..., 1])


@dataclass(frozen=True)
class SyntheticTask:
    """``g(x + shift) + scale * h(x)`` with a grid-located global minimum."""

    shift: tuple[float, float]
    scale: float
    optimum_point: tuple[float, float] = (math.nan, math.nan)
    optimum: float = math.nan

    def values(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return _two_well(X + np.asarray(self.shift)) + self.scale * _ripple(X)

    def __call__(self, x) -> float:
        return float(self.values(np.asarray(x, dtype=float).reshape(2)))


def grid_points(side: int) -> np.ndarray:
    """``side**2`` box points in j-major order (first coordinate slowest)."""
    ax = BOX[0] + (BOX[1] - BOX[0]) * np.arange(side) / (side - 1)
    ax[-1] = BOX[1]
    return np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1).reshape(-1, 2)


def _grid_argmin(task: SyntheticTask, side: int = 1001) -> tuple[tuple[float, float], float]:
    P = grid_points(side)
    v = task.values(P)
    k = int(np.argmin(v))
    return (float(P[k, 0]), float(P[k, 1])), float(v[k])


def synthetic_tasks(M: int, correlation: float, seed: int = 0) -> list[SyntheticTask]:
    """Related tasks whose shift and ripple shrink to zero as `correlation` -> 1."""
    if not 0 <= correlation <= 1:
        raise ValueError("correlation must lie in [0, 1]")
    rng = np.random.default_rng([seed, 17])
    spread = 1.0 - correlation
    out = []
    for _ in range(M):
        angle = rng.uniform(0, 2 * np.pi)
        r = 3.0 * spread * math.sqrt(rng.uniform())
        shift = (r * math.cos(angle) + 0.0, r * math.sin(angle) + 0.0)
        scale = 4.0 * spread * rng.uniform(-1.0, 1.0)
        t = SyntheticTask(shift, scale)
        point, value = _grid_argmin(t)
        out.append(replace(t, optimum_point=point, optimum=value))
    return out


# ---------------------------------------------------------------------------
# landscapes and RMSE


@dataclass(frozen=True, eq=False)
class LandscapeGrid:
    grid_side: int
    points: np.ndarray  # (side**2, 2) in log10 space, j-major
    losses: np.ndarray  # raw losses
    flags: tuple[tuple[str, ...], ...] = ()

    @property
    def optimum(self) -> float:
        return float(self.losses.min())

    def write_csv(self, path, task: int = 1) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["task", "j", "k", "log10_c", "log10_gamma", "raw_loss", "flags"])
            s = self.grid_side
            for r, (p, L) in enumerate(zip(self.points, self.losses)):
                fl = ";".join(self.flags[r]) if self.flags else ""
                w.writerow([task, r // s, r % s, repr(float(p[0])), repr(float(p[1])), repr(float(L)), fl])

    @classmethod
    def read_csv(cls, path) -> "LandscapeGrid":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        side = int(round(math.sqrt(len(rows))))
        if side * side != len(rows):
            raise ValueError(f"{path}: {len(rows)} rows is not a square grid")
        pts = np.array([[float(r["log10_c"]), float(r["log10_gamma"])] for r in rows])
        losses = np.array([float(r["raw_loss"]) for r in rows])
        flags = tuple(tuple(f for f in r["flags"].split(";") if f) for r in rows)
        return cls(side, pts, losses, flags)


def eval_landscape(target, cv: CVConfig | None = None, grid_side: int = 61) -> LandscapeGrid:
    """Raw loss on the full grid for a Dataset (via CV) or a plain objective."""
    pts = grid_points(grid_side)
    if isinstance(target, SyntheticTask):
        return LandscapeGrid(grid_side, pts, target.values(pts), ((),) * len(pts))
    if isinstance(target, Dataset):
        cv = cv or CVConfig()

        def one(p):
            res = cross_validate(target, SVMHyperparams.from_log10(p), cv)
            return res.loss, res.flags
    else:
        def one(p):
            out = target(p)
            return (float(out[0]), tuple(out[1])) if isinstance(out, tuple) else (float(out), ())

    results = _pmap(one, pts)
    return LandscapeGrid(grid_side, pts, np.array([r[0] for r in results]), tuple(r[1] for r in results))


def rmse(model, landscape: LandscapeGrid, task: int = 1, space: str = "transformed") -> float:
    """Root-mean-square surrogate error over every grid point.

    ``space="transformed"`` compares the posterior mean with the
    tan-transformed losses; ``space="raw"`` back-transforms the mean first.
    """
    mean, _ = model.predict(landscape.points, task)
    mean = np.asarray(mean, dtype=float)
    if space == "transformed":
        err = mean - transform_loss(landscape.losses)
    elif space == "raw":
        err = inverse_transform(mean) - landscape.losses
    else:
        raise ValueError("space must be 'transformed' or 'raw'")
    return float(np.sqrt(np.mean(err ** 2)))


# ---------------------------------------------------------------------------
# run comparison


def evaluations_to_threshold(trace: Sequence[TraceRecord], task: int, optimum: float,
                             rel: float = THRESHOLD_REL) -> int:
    """1-based count of the task's first evaluation within `rel` of `optimum`.

    Returns the task's evaluation count plus one when never reached.
    """
    target = optimum + rel * abs(optimum)
    losses = [r.raw_loss for r in trace if r.task == task]
    for k, L in enumerate(losses):
        if L <= target:
            return k + 1
    return len(losses) + 1


def _trace_observations(trace: Sequence[TraceRecord], num_tasks: int, relabel: int | None = None) -> ObservationSet:
    obs = [Observation(r.point, relabel or r.task, r.transformed_loss) for r in trace]
    return ObservationSet(obs, num_tasks)


@dataclass
class RunReport:
    """STBO vs MTBO summary; every field is derivable from the traces (and landscapes)."""

    num_tasks: int
    config: dict
    stbo_optima: list[dict]
    mtbo_optima: list[dict]
    evaluations_to_threshold: list[dict] = field(default_factory=list)
    rmse: list[dict] = field(default_factory=list)
    inference_comparison: list[dict] = field(default_factory=list)
    rejected: list[dict] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)
    footer: str = ("RMSE divides by the number of grid points (grid_side**2), "
                   "so it is a true root-mean-square over the grid.")
    stbo_traces: dict = field(default_factory=dict, repr=False)
    mtbo_trace: list = field(default_factory=list, repr=False)
    impute_trace: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("stbo_traces", "mtbo_trace", "impute_trace"):
            d.pop(k)
        return d

    def curves(self) -> list[tuple]:
        rows = []
        for t in range(1, self.num_tasks + 1):
            for method, tr in (("stbo", self.stbo_traces.get(t, [])), ("mtbo", self.mtbo_trace)):
                for k, b in enumerate(best_so_far(tr, t)):
                    rows.append((method, t, k + 1, float(b)))
        return rows

    def write(self, out_dir) -> Path:
        """``report.json``, ``best_so_far.csv`` and one trace CSV per run."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=2))
        with open(out / "best_so_far.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "task", "evaluation", "best_so_far"])
            for m, t, k, b in self.curves():
                w.writerow([m, t, k, repr(b)])
        for t, tr in self.stbo_traces.items():
            write_trace_csv(out / f"stbo_task{t}.csv", tr)
        if self.mtbo_trace:
            write_trace_csv(out / "mtbo.csv", self.mtbo_trace)
        if self.impute_trace:
            write_trace_csv(out / "mtbo_impute.csv", self.impute_trace)
        return out / "report.json"


def build_report(stbo_traces: dict, mtbo_trace: Sequence[TraceRecord], num_tasks: int, cfg: MTBOConfig,
                 landscapes: Sequence[LandscapeGrid] | None = None, optima: Sequence[float] | None = None,
                 impute_trace: Sequence[TraceRecord] | None = None, failures=(), rejected=()) -> RunReport:
    """Project traces (plus optional landscapes) onto a RunReport.

    Thresholds use `optima` if given, else the landscape minima.  RMSE
    models are refitted on the trace data with a fixed seed, so the report
    is reproducible from persisted traces.
    """
    M = num_tasks
    failures = list(failures)
    config = {k: v for k, v in asdict(cfg).items() if k != "fit_options"}
    config["fit_options"] = asdict(cfg.fit_options)
    report = RunReport(
        M, config,
        stbo_optima=[o for t in range(1, M + 1) for o in optima_from_trace(stbo_traces.get(t, []), t)[t - 1:]],
        mtbo_optima=optima_from_trace(mtbo_trace, M),
        rejected=[asdict(r) if isinstance(r, Rejection) else dict(r) for r in rejected],
        stbo_traces=dict(stbo_traces), mtbo_trace=list(mtbo_trace), impute_trace=list(impute_trace or []),
    )
    if optima is None and landscapes is not None:
        optima = [g.optimum for g in landscapes]
    if optima is not None:
        for t in range(1, M + 1):
            row = {"task": t, "optimum": float(optima[t - 1]),
                   "stbo": evaluations_to_threshold(stbo_traces.get(t, []), t, optima[t - 1]),
                   "mtbo": evaluations_to_threshold(mtbo_trace, t, optima[t - 1])}
            if impute_trace:
                row["mtbo_impute"] = evaluations_to_threshold(impute_trace, t, optima[t - 1])
            report.evaluations_to_threshold.append(row)
    if impute_trace:
        for e, i in zip(report.mtbo_optima, optima_from_trace(impute_trace, M)):
            report.inference_comparison.append({"task": e["task"], "exact_loss": e.get("loss"),
                                                "impute_loss": i.get("loss")})
    if landscapes is not None:
        try:
            report.rmse = _rmse_rows(stbo_traces, mtbo_trace, M, cfg, landscapes)
        except FitFailure as exc:
            failures.append(f"rmse: {exc}")
    report.failures = failures
    return report


def _rmse_rows(stbo_traces, mtbo_trace, M, cfg, landscapes) -> list[dict]:
    opts = cfg.fit_options
    multi = fit(_trace_observations(mtbo_trace, M), restarts=cfg.fit_restarts, seed=0, options=opts)
    rows = []
    for t in range(1, M + 1):
        single = fit(_trace_observations(stbo_traces[t], 1, relabel=1), restarts=cfg.fit_restarts, seed=0,
                     options=opts)
        g = landscapes[t - 1]
        rows.append({
            "task": t,
            "single_transformed": rmse(single, g, 1), "multi_transformed": rmse(multi, g, t),
            "single_raw": rmse(single, g, 1, "raw"), "multi_raw": rmse(multi, g, t, "raw"),
        })
    return rows


def compare_runs(tasks: Sequence, cfg: MTBOConfig, landscapes: Sequence[LandscapeGrid] | None = None,
                 optima: Sequence[float] | None = None, compare_inference: bool = False,
                 rejected=()) -> RunReport:
    """Run STBO per task and MTBO on all tasks with the same seed, then report.

    `tasks` are Datasets (scored by CV loss with ``cfg.folds`` folds) or
    plain objectives.  STBO runs as many evaluations per task as MTBO
    allots.  A failed run leaves its partial trace in the report and a
    note in ``failures``.
    """
    M = len(tasks)
    cv = CVConfig(k=cfg.folds, seed=cfg.seed)
    objectives = [dataset_objective(t, cv) if isinstance(t, Dataset) else t for t in tasks]
    per_task = cfg.iter1 + (cfg.iter2 - cfg.iter1) // M + (1 if (cfg.iter2 - cfg.iter1) % M else 0)
    if optima is None and all(isinstance(t, SyntheticTask) for t in tasks):
        optima = [t.optimum for t in tasks]
    failures = []

    def run_st(t):
        try:
            return stbo_run(objectives[t - 1], per_task, seed=cfg.seed, task=t, cfg=cfg)
        except BOAborted as exc:
            failures.append(f"stbo task {t}: {exc}")
            return exc.trace

    stbo = dict(zip(range(1, M + 1), _pmap(run_st, range(1, M + 1))))

    def run_mt(c):
        try:
            return mtbo_run(objectives, c).trace
        except BOAborted as exc:
            failures.append(f"mtbo ({c.inference}): {exc}")
            return exc.trace

    mt = run_mt(cfg)
    imp = run_mt(replace(cfg, inference="impute")) if compare_inference else None
    return build_report(stbo, mt, M, cfg, landscapes, optima, imp, sorted(failures), rejected)


def load_traces(run_dir, num_tasks: int) -> tuple[dict, list]:
    run_dir = Path(run_dir)
    stbo = {t: read_trace_csv(run_dir / f"stbo_task{t}.csv") for t in range(1, num_tasks + 1)
            if (run_dir / f"stbo_task{t}.csv").exists()}
    mt = read_trace_csv(run_dir / "mtbo.csv") if (run_dir / "mtbo.csv").exists() else []
    return stbo, mt
