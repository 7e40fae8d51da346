"""Expected-improvement Bayesian optimization, single-task and multi-task.

Search happens in ``[-3, 3]^2`` over ``(log10 C, log10 gamma)``.  Objectives
return a raw loss in ``[0, 1]`` (optionally with a tuple of flags); the
surrogate models the tan-transformed loss.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import qmc

from .errors import FitFailure
from .mtgp import (
    BOX, FitOptions, MTGPHyperparams, MTGPModel, Observation, ObservationSet, default_init, fit, impute_missing,
)
from .svm import transform_loss

TRACE_COLUMNS = (
    "global_iter", "task", "log10_c", "log10_gamma", "c", "gamma",
    "raw_loss", "transformed_loss", "best_so_far", "wall_time_ms", "flags",
)
START_POINT = (0.0, 0.0)  # (C, gamma) = (1, 1)
_INV_SQRT_2PI = 1.0 / np.sqrt(2 * np.pi)

Objective = Callable[[np.ndarray], "float | tuple[float, Sequence[str]]"]


def expected_improvement(model: MTGPModel, points, task: int, y_best: float) -> np.ndarray:
    """Closed-form EI for minimization, ``E[max(0, y_best - f)]``."""
    mean, var = model.predict(points, task)
    return _ei(mean, np.sqrt(var), y_best)


def _ei(mean, sd, y_best):
    mean, sd = np.asarray(mean, dtype=float), np.asarray(sd, dtype=float)
    safe = np.where(sd < 1e-12, 1.0, sd)
    eta = (y_best - mean) / safe
    ei = safe * (eta * ndtr(eta) + _INV_SQRT_2PI * np.exp(-0.5 * eta * eta))
    ei = np.where(sd < 1e-12, np.maximum(0.0, y_best - mean), ei)
    return np.maximum(ei, 0.0)


def _ranked(ei, mean, X) -> np.ndarray:
    # highest EI, then lowest mean, then lexicographic coordinates
    return np.lexsort((X[:, 1], X[:, 0], mean, -ei))


def maximize_ei(model: MTGPModel, task: int, y_best: float | None = None, seed: int = 0,
                n_candidates: int = 1024, n_starts: int = 8, local_evals: int = 64) -> np.ndarray:
    """Best EI point for a fixed task.

    A scrambled Sobol design of `n_candidates` points is scored, then the top
    `n_starts` are refined by compass search (step halves on failure,
    `local_evals` evaluations each).
    """
    if y_best is None:
        y_best = model.train.best()
    lo, hi = BOX
    sobol = qmc.Sobol(d=2, scramble=True, seed=seed)
    X = lo + (hi - lo) * sobol.random(n_candidates)

    def score(P):
        mean, var = model.predict(P, task)
        return _ei(mean, np.sqrt(var), y_best), mean

    ei, mean = score(X)
    order = _ranked(ei, mean, X)[:n_starts]
    cur, cur_ei, cur_mean = X[order].copy(), ei[order].copy(), mean[order].copy()
    step = np.full(len(order), 0.25 * (hi - lo))
    moves = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    for _ in range(local_evals // len(moves)):
        trial = np.clip(cur[:, None, :] + step[:, None, None] * moves[None], lo, hi).reshape(-1, 2)
        t_ei, t_mean = score(trial)
        t_ei = t_ei.reshape(len(order), len(moves))
        t_mean = t_mean.reshape(len(order), len(moves))
        best = np.argmax(t_ei, axis=1)
        rows = np.arange(len(order))
        gain = t_ei[rows, best] > cur_ei
        cur[gain] = trial.reshape(len(order), len(moves), 2)[rows, best][gain]
        cur_ei[gain] = t_ei[rows, best][gain]
        cur_mean[gain] = t_mean[rows, best][gain]
        step[~gain] *= 0.5

    allX = np.vstack([X, cur])
    allei = np.concatenate([ei, cur_ei])
    allmean = np.concatenate([mean, cur_mean])
    return allX[_ranked(allei, allmean, allX)[0]].copy()


# ---------------------------------------------------------------------------
# traces


@dataclass(frozen=True)
class TraceRecord:
    global_iter: int
    task: int
    point: tuple[float, float]
    raw_loss: float
    transformed_loss: float
    best_so_far_per_task: tuple[float, ...]
    wall_time_ms: int = 0
    flags: tuple[str, ...] = ()

    @property
    def hyperparams(self) -> tuple[float, float]:
        return 10.0 ** self.point[0], 10.0 ** self.point[1]

    def row(self) -> list[str]:
        c, g = self.hyperparams
        return [
            str(self.global_iter), str(self.task), repr(self.point[0]), repr(self.point[1]),
            repr(c), repr(g), repr(self.raw_loss), repr(self.transformed_loss),
            repr(self.best_so_far_per_task[self.task - 1]), str(self.wall_time_ms), ";".join(self.flags),
        ]


def best_so_far(trace: Sequence[TraceRecord], task: int) -> np.ndarray:
    """Running minimum of the raw loss over the task's evaluations."""
    losses = np.array([r.raw_loss for r in trace if r.task == task], dtype=float)
    return np.minimum.accumulate(losses) if losses.size else losses


def write_trace_csv(path, trace: Sequence[TraceRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in trace:
            w.writerow(r.row())


def read_trace_csv(path) -> list[TraceRecord]:
    """Read a trace back; ``best_so_far_per_task`` is rebuilt from the rows."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    M = max((int(r["task"]) for r in rows), default=1)
    best = [np.inf] * M
    out = []
    for r in rows:
        t = int(r["task"])
        loss = float(r["raw_loss"])
        best[t - 1] = min(best[t - 1], loss)
        out.append(TraceRecord(
            int(r["global_iter"]), t, (float(r["log10_c"]), float(r["log10_gamma"])), loss,
            float(r["transformed_loss"]), tuple(best), int(r["wall_time_ms"]),
            tuple(f for f in r["flags"].split(";") if f),
        ))
    return out


# ---------------------------------------------------------------------------
# loops


@dataclass(frozen=True)
class MTBOConfig:
    iter1: int = 10
    iter2: int = 190
    folds: int = 10
    seed: int = 0
    inference: str = "exact"  # or "impute"
    per_task_best: bool = False
    fit_restarts: int = 2
    fit_options: FitOptions = field(default_factory=lambda: FitOptions(maxiter=200, ftol=1e-9, gtol=1e-5))
    n_candidates: int = 1024
    record_timing: bool = True

    def __post_init__(self):
        if self.iter1 < 1:
            raise ValueError("iter1 must be >= 1")
        if self.iter2 <= self.iter1:
            raise ValueError("iter2 must exceed iter1")
        if self.inference not in ("exact", "impute"):
            raise ValueError("inference must be 'exact' or 'impute'")

    @classmethod
    def for_budget(cls, num_tasks: int, evals_per_task: int = 30, iter1: int = 10, **kw) -> "MTBOConfig":
        """Config giving every task exactly `evals_per_task` evaluations."""
        return cls(iter1=iter1, iter2=iter1 + num_tasks * (evals_per_task - iter1), **kw)


@dataclass
class MTBOResult:
    trace: list[TraceRecord]
    optima: list[dict]
    models: dict = field(default_factory=dict)


class BOAborted(FitFailure):
    """Raised when the surrogate cannot be fitted; carries the partial trace."""

    def __init__(self, msg, trace):
        super().__init__(msg)
        self.trace = trace


def _subseed(seed: int, it: int, purpose: int) -> int:
    return int(np.random.SeedSequence([seed, it, purpose]).generate_state(1)[0])


def _call(objective: Objective, x) -> tuple[float, tuple[str, ...]]:
    out = objective(np.asarray(x, dtype=float))
    if isinstance(out, tuple):
        loss, flags = out
        return float(loss), tuple(flags)
    return float(out), ()


class _Recorder:
    def __init__(self, num_tasks: int, timing: bool):
        self.trace: list[TraceRecord] = []
        self.best = [np.inf] * num_tasks
        self.timing = timing

    def evaluate(self, objective, x, task, it, extra_flags=()) -> Observation:
        t0 = time.perf_counter()
        loss, flags = _call(objective, x)
        ms = int(round((time.perf_counter() - t0) * 1000)) if self.timing else 0
        y = transform_loss(loss)
        self.best[task - 1] = min(self.best[task - 1], loss)
        self.trace.append(TraceRecord(it, task, (float(x[0]), float(x[1])), loss, y,
                                      tuple(self.best), ms, tuple(flags) + tuple(extra_flags)))
        return Observation(x, task, y)


def _single_task_step(obs: ObservationSet, it: int, prev: MTGPHyperparams | None, cfg: MTBOConfig):
    """Fit the single-task GP and pick its EI maximizer for iteration `it`."""
    model = fit(obs, restarts=cfg.fit_restarts, seed=_subseed(cfg.seed, it, 0), init=prev, options=cfg.fit_options)
    x = maximize_ei(model, 1, obs.best(), seed=_subseed(cfg.seed, it, 1), n_candidates=cfg.n_candidates)
    return x, model


def stbo_run(objective: Objective, iters: int, seed: int = 0, task: int = 1,
             cfg: MTBOConfig | None = None) -> list[TraceRecord]:
    """Single-task BO from (C, gamma) = (1, 1) for `iters` evaluations.

    Records carry `task` as their task label; fitting and acquisition
    settings come from `cfg` (its seed is replaced by `seed`).
    """
    cfg = _with_seed(cfg, seed)
    rec = _Recorder(task, cfg.record_timing)
    obs = ObservationSet([], 1)
    o = rec.evaluate(objective, np.array(START_POINT), task, 0)
    obs = obs.add(Observation(o.point, 1, o.y))
    prev = None
    for it in range(1, iters):
        try:
            x, model = _single_task_step(obs, it, prev, cfg)
        except FitFailure as exc:
            raise BOAborted(str(exc), rec.trace) from exc
        prev = model.params
        o = rec.evaluate(objective, x, task, it)
        obs = obs.add(Observation(o.point, 1, o.y))
    return rec.trace


def _with_seed(cfg: MTBOConfig | None, seed: int) -> MTBOConfig:
    return replace(cfg or MTBOConfig(), seed=seed)


def mtbo_run(objectives: Sequence[Objective], cfg: MTBOConfig) -> MTBOResult:
    """Warm start on task 1 with every task evaluated, then round-robin multi-task EI.

    Phase 1 evaluates all tasks at (1, 1).  Phase 2 runs single-task BO on
    task 1 for ``iter1 - 1`` more selections, evaluating every task at each.
    Phase 3 covers global iterations ``iter1 .. iter2 - 1``; iteration ``i``
    serves task ``(i - iter1) mod M + 1`` only.  Hyperparameters are refitted
    once per round-robin sweep; in between the model is conditioned on new
    data with fixed hyperparameters.
    """
    M = len(objectives)
    rec = _Recorder(M, cfg.record_timing)
    real = ObservationSet([], M)

    def evaluate_all(x, it):
        nonlocal real
        real = real.add(*(rec.evaluate(objectives[t - 1], x, t, it) for t in range(1, M + 1)))

    evaluate_all(np.array(START_POINT), 0)
    prev = None
    for it in range(1, cfg.iter1):
        task1 = ObservationSet([Observation(o.point, 1, o.y) for o in real if o.task == 1], 1)
        try:
            x, model = _single_task_step(task1, it, prev, cfg)
        except FitFailure as exc:
            raise BOAborted(str(exc), rec.trace) from exc
        prev = model.params
        evaluate_all(x, it)

    if M > 1:
        prev = None
    impute = cfg.inference == "impute" and M > 1
    model = None
    last = None
    for i in range(cfg.iter1, cfg.iter2):
        task = (i - cfg.iter1) % M + 1
        try:
            if (i - cfg.iter1) % M == 0:
                if impute:
                    seed_params = prev if prev is not None else default_init(real)
                    model = fit(impute_missing(real, seed_params), restarts=cfg.fit_restarts,
                                seed=_subseed(cfg.seed, i, 0), init=prev, options=cfg.fit_options)
                else:
                    model = fit(real, restarts=cfg.fit_restarts, seed=_subseed(cfg.seed, i, 0),
                                init=prev, options=cfg.fit_options)
                prev = model.params
            elif impute:
                model = MTGPModel(impute_missing(real, model.params), model.params)
            else:
                model = model.extend(last)
        except FitFailure as exc:
            raise BOAborted(str(exc), rec.trace) from exc
        y_best = real.best(task) if cfg.per_task_best else real.best()
        x = maximize_ei(model, task, y_best, seed=_subseed(cfg.seed, i, 1), n_candidates=cfg.n_candidates)
        flags = ("Imputed",) if impute and len(model.train) > len(real) else ()
        last = rec.evaluate(objectives[task - 1], x, task, i, flags)
        real = real.add(last)

    return MTBOResult(rec.trace, optima_from_trace(rec.trace, M), {"final": model})


def optima_from_trace(trace: Sequence[TraceRecord], num_tasks: int) -> list[dict]:
    """Per task: first evaluation attaining the minimum raw loss."""
    out = []
    for t in range(1, num_tasks + 1):
        recs = [r for r in trace if r.task == t]
        if not recs:
            out.append({"task": t, "evaluations": 0})
            continue
        k = int(np.argmin([r.raw_loss for r in recs]))
        r = recs[k]
        c, g = r.hyperparams
        out.append({
            "task": t, "loss": r.raw_loss, "C": c, "gamma": g,
            "log10_c": r.point[0], "log10_gamma": r.point[1],
            "global_iter": r.global_iter, "evaluation": k + 1, "evaluations": len(recs),
        })
    return out
