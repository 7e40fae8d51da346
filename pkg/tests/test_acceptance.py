"""End-to-end acceptance checks; each test records one PASS/FAIL line."""
import math
import time

import numpy as np
import pytest

from mtbo.bo import MTBOConfig, _ei, expected_improvement, mtbo_run, stbo_run, write_trace_csv
from mtbo.discretize import (
    DiscretizationStrategy, IntensityVolume, MeanPlusMinusSD, MinMax, VoxelMask, discretize, discretize_values,
    strategy_grid,
)
from mtbo.harness import (
    PhantomSpec, build_datasets, compare_runs, dataset_objective, eval_landscape, gen_phantom, synthetic_tasks,
)
from mtbo.mtgp import (
    MTGPHyperparams, MTGPModel, Observation, ObservationSet, fit, lml_gradient, log_marginal_likelihood, predict,
)
from mtbo.radiomics import FEATURE_NAMES, features_from_roi
from mtbo.svm import CVConfig, Dataset, SVMHyperparams, dual_objective, inverse_transform, rbf_kernel, train_svm, \
    transform_loss
from oracles import ei_monte_carlo, kkt_violation, mtgp_naive, qp_oracle, random_mtgp_problem
from test_radiomics import W1_FIRST, W1_GLCM, W1_GLRLM, W1_RAW, W2_FIRST, W2_GLCM, W2_GLRLM, W2_RAW


def rel_err(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def make_set(pts, tasks, y, M):
    return ObservationSet([Observation(tuple(p), int(t) + 1, float(v)) for p, t, v in zip(pts, tasks, y)], M)


def line_volume(values):
    v = np.asarray(values, dtype=float).reshape(-1, 1, 1)
    return IntensityVolume(v), VoxelMask(np.ones_like(v, dtype=bool))


def test_01_mtgp_matches_dense_oracle(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(50):
        rng = np.random.default_rng(1000 + k)
        block = k % 2 == 0
        M, N = int(rng.integers(1, 5)), int(rng.integers(2, 31))
        pts, tasks, y, Lt, ls, noise, mu = random_mtgp_problem(rng, M, N, block)
        model = MTGPModel(make_set(pts, tasks, y, M), MTGPHyperparams(mu, Lt, math.log(ls), 0.5 * np.log(noise)))
        lml, pred = mtgp_naive(pts, tasks, y, np.zeros(len(y), bool), Lt @ Lt.T, ls, noise, mu)
        worst = max(worst, rel_err(model.lml, lml))
        for xs in rng.uniform(-3, 3, (3, 2)):
            for t in range(M):
                mean, var = predict(model, xs, t + 1)
                m0, v0 = pred(xs, t)
                worst = max(worst, rel_err(mean, m0), rel_err(var, v0))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 30
    verdict(1, "MTGP vs dense oracle", ok, f"max rel err {worst:.2e}, {elapsed:.1f} s")
    assert ok


def test_02_single_task_reduction(verdict):
    t0 = time.perf_counter()
    mismatches = 0
    for seed in range(20):
        task = synthetic_tasks(1, 1.0, seed)[0]
        cfg = MTBOConfig(iter1=5, iter2=20, seed=seed, record_timing=False)
        mt = [r.point for r in mtbo_run([task], cfg).trace]
        st = [r.point for r in stbo_run(task, 20, seed=seed, cfg=cfg)]
        mismatches += mt != st
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 60
    verdict(2, "M=1 MTBO equals STBO", ok, f"{mismatches}/20 seeds differ, {elapsed:.1f} s")
    assert ok


def test_03_expected_improvement(verdict):
    rng = np.random.default_rng(0)
    worst = 0.0
    for k in range(20):
        mean, sd, best = rng.normal(0, 1), rng.uniform(0.05, 1.0), rng.normal(0, 1)
        worst = max(worst, abs(_ei(mean, sd, best) - ei_monte_carlo(mean, sd, best, seed=k)))
    g = np.linspace(-3, 3, 61)
    grid = np.array([(a, b) for a in g for b in g])
    lowest = np.inf
    for seed in range(5):
        r = np.random.default_rng(seed)
        X = r.uniform(-3, 3, (12, 2))
        y = np.sin(X[:, 0]) + np.cos(X[:, 1]) + 0.1 * r.normal(size=12)
        model = fit(ObservationSet([Observation(tuple(x), 1, float(v)) for x, v in zip(X, y)], 1), seed=seed)
        lowest = min(lowest, expected_improvement(model, grid, 1, model.train.best()).min())
    ok = worst <= 1e-3 and lowest >= 0.0
    verdict(3, "EI vs Monte Carlo, EI >= 0", ok, f"max abs err {worst:.2e}, min grid EI {lowest:.3g}")
    assert ok


def test_04_smo_matches_qp_oracle(verdict):
    rng = np.random.default_rng(0)
    worst_rel, worst_kkt = 0.0, 0.0
    for _ in range(25):
        n, d = int(rng.integers(4, 21)), int(rng.integers(1, 5))
        X = rng.normal(size=(n, d))
        y = np.where(X[:, 0] + 0.5 * rng.normal(size=n) > 0, 1, -1)
        if abs(y.sum()) == n:
            y[0] = -y[0]
        C, gamma = 10 ** rng.uniform(-1, 1), 10 ** rng.uniform(-1, 0.5)
        model = train_svm(Dataset(X, y), SVMHyperparams(C, gamma))
        K = rbf_kernel(X, X, gamma)
        _, best = qp_oracle(K, y.astype(float), C)
        worst_rel = max(worst_rel, rel_err(dual_objective(model.alpha, K, y), best))
        worst_kkt = max(worst_kkt, kkt_violation(model.alpha, K, y.astype(float), C))
    ok = worst_rel <= 1e-6 and worst_kkt <= 1e-3
    verdict(4, "SMO vs QP oracle", ok, f"max rel err {worst_rel:.2e}, max KKT violation {worst_kkt:.2e}")
    assert ok


def test_05_gradient_check(verdict):
    worst = 0.0
    for k in range(20):
        rng = np.random.default_rng(500 + k)
        block = k % 2 == 0
        M, N = int(rng.integers(1, 5)), int(rng.integers(2, 9))
        pts, tasks, y, Lt, ls, noise, mu = random_mtgp_problem(rng, M, N, block)
        train = make_set(pts, tasks, y, M)
        method = "kron" if block and k % 4 == 0 else "dense"
        v = MTGPHyperparams(mu, Lt, math.log(ls), 0.5 * np.log(noise)).to_vector()
        g = lml_gradient(train, MTGPHyperparams.from_vector(v, M), method)
        fd = np.empty_like(v)
        for i in range(v.size):
            e = np.zeros_like(v)
            e[i] = 1e-5
            hi = log_marginal_likelihood(train, MTGPHyperparams.from_vector(v + e, M), method)
            lo = log_marginal_likelihood(train, MTGPHyperparams.from_vector(v - e, M), method)
            fd[i] = (hi - lo) / 2e-5
        worst = max(worst, np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1.0))
    ok = worst <= 1e-4
    verdict(5, "LML gradient vs finite differences", ok, f"max rel err {worst:.2e}")
    assert ok


def test_06_discretization(verdict):
    edge = np.array_equal(discretize_values([0, 1, 1.5, 2, 3, 3.5, 4], 0, 4, 4), [1, 1, 2, 2, 3, 4, 4])
    labels = [s.label() for s in strategy_grid()]
    order = labels == [f"N={n}, {r}" for n in (16, 32, 64) for r in ("min-max", "mean ± 2SD", "mean ± 3SD")]
    rng = np.random.default_rng(2024)
    failures = 0
    for _ in range(1000):
        vals = rng.normal(size=rng.integers(2, 100)) * rng.uniform(0.1, 50) + rng.uniform(-100, 100)
        alpha, beta = rng.uniform(0.1, 10), rng.uniform(-100, 100)
        s = DiscretizationStrategy(int(rng.choice([16, 32, 64])), MeanPlusMinusSD(float(rng.choice([2.0, 3.0]))))
        a = discretize(*line_volume(vals), s).levels
        b = discretize(*line_volume(alpha * vals + beta), s).levels
        failures += not np.array_equal(a, b)
    ok = edge and order and failures == 0
    verdict(6, "discretization", ok, f"edge rule {edge}, table order {order}, affine failures {failures}/1000")
    assert ok


def test_07_feature_worksheet(verdict):
    bad = []
    for tag, raw, n, first, glcm, glrlm in [("W1", W1_RAW, 4, W1_FIRST, W1_GLCM, W1_GLRLM),
                                            ("W2", W2_RAW, 2, W2_FIRST, W2_GLCM, W2_GLRLM)]:
        vol = IntensityVolume(raw)
        mask = VoxelMask(np.ones(raw.shape, bool))
        fv = features_from_roi(discretize(vol, mask, DiscretizationStrategy(n, MinMax())), raw.T.ravel())
        expected = {**{f"firstorder_{k}": v for k, v in first.items()},
                    **{f"glcm_{k}": v for k, v in glcm.items()},
                    **{f"glrlm_{k}": v for k, v in glrlm.items()}}
        bad += [f"{tag}:{name}" for name in FEATURE_NAMES
                if fv[name] != pytest.approx(expected[name], rel=1e-12, abs=1e-14)]
    ok = not bad
    verdict(7, "features vs worksheet", ok, f"{2 * len(FEATURE_NAMES) - len(bad)}/{2 * len(FEATURE_NAMES)} match")
    assert ok


@pytest.mark.slow
def test_08_transfer_speedup(verdict):
    t0 = time.perf_counter()
    st, mt = [], []
    for seed in range(20):
        rep = compare_runs(synthetic_tasks(4, 0.9, seed), MTBOConfig.for_budget(4, seed=seed, record_timing=False))
        st.append([r["stbo"] for r in rep.evaluations_to_threshold])
        mt.append([r["mtbo"] for r in rep.evaluations_to_threshold])
    ms, mm = np.median(st, axis=0), np.median(mt, axis=0)
    elapsed = time.perf_counter() - t0
    ok = bool(np.all(mm <= ms)) and mm.sum() <= 0.9 * ms.sum() and elapsed < 300
    verdict(8, "transfer speed-up", ok,
            f"median STBO {ms.tolist()}, MTBO {mm.tolist()}, ratio {mm.sum() / ms.sum():.3f}, {elapsed:.0f} s")
    assert ok


@pytest.mark.slow
def test_09_fit_quality(verdict):
    t0 = time.perf_counter()
    tasks = synthetic_tasks(9, 0.9, 0)
    grids = [eval_landscape(t, grid_side=31) for t in tasks]
    rep = compare_runs(tasks, MTBOConfig.for_budget(9, seed=0, record_timing=False), grids)
    wins = sum(r["multi_transformed"] <= r["single_transformed"] for r in rep.rmse)
    elapsed = time.perf_counter() - t0
    ok = wins >= 7 and elapsed < 300
    verdict(9, "multi-task RMSE direction", ok, f"{wins}/9 tasks, {elapsed:.0f} s")
    assert ok


@pytest.mark.slow
def test_10_end_to_end_determinism(verdict, tmp_path):
    t0 = time.perf_counter()
    counts = []
    for name in ("a", "b"):
        datasets, _ = build_datasets(gen_phantom(PhantomSpec()))
        cfg = MTBOConfig(iter1=10, iter2=190, folds=10, seed=0, record_timing=False)
        res = mtbo_run([dataset_objective(d, CVConfig(cfg.folds, cfg.seed)) for d in datasets], cfg)
        write_trace_csv(tmp_path / f"{name}.csv", res.trace)
        counts.append([sum(r.task == t for r in res.trace) for t in range(1, 10)])
    same = (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    elapsed = time.perf_counter() - t0
    ok = same and counts == [[30] * 9] * 2 and elapsed < 600
    verdict(10, "phantom pipeline determinism", ok, f"identical {same}, per-task counts {counts[0]}, {elapsed:.0f} s")
    assert ok


def test_11_transform_round_trip(verdict):
    L = np.concatenate([np.linspace(1e-3, 1 - 1e-3, 10_000), np.round(np.arange(0.1804, 0.19845, 0.002), 4)])
    err = float(np.max(np.abs(inverse_transform(transform_loss(L)) - L)))
    ok = err <= 1e-12
    verdict(11, "loss transform round trip", ok, f"max abs err {err:.2e}")
    assert ok
