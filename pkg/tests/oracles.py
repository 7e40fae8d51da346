"""Independent reference implementations used by the tests.

None of these share code paths with the package beyond plain numpy/scipy.
"""

import math

import numpy as np
from scipy.special import erf

# ---------------------------------------------------------------------------
# SVM dual QP: min 1/2 a^T Q a - 1^T a,  0 <= a <= C,  y^T a = 0


def _project(v, y, C):
    """Euclidean projection onto {0 <= a <= C, y^T a = 0}.

    ``phi(lam) = y^T clip(v - lam y, 0, C)`` is piecewise linear and
    non-increasing, so the root is found exactly between two breakpoints.
    """
    bp = np.unique(np.concatenate([v * y, (v - C) * y]))  # y_i = +-1, so 1/y_i = y_i
    phi = (y[None, :] * np.clip(v[None, :] - bp[:, None] * y[None, :], 0.0, C)).sum(axis=1)
    k = np.searchsorted(-phi, 0.0)  # first breakpoint with phi <= 0
    if k == 0:
        lam = bp[0]
    elif k == bp.size:
        lam = bp[-1]
    else:
        lo, hi, flo, fhi = bp[k - 1], bp[k], phi[k - 1], phi[k]
        lam = hi if flo == fhi else lo + (hi - lo) * flo / (flo - fhi)
    return np.clip(v - lam * y, 0.0, C)


def qp_oracle(K, y, C, iters=20000):
    """Accelerated projected gradient, then an exact solve on the identified free set."""
    Q = (y[:, None] * y[None, :]) * K
    L = np.linalg.eigvalsh(Q).max()
    a = np.zeros(y.size)
    z, t = a.copy(), 1.0
    for _ in range(iters):
        a_new = _project(z - (Q @ z - 1.0) / L, y, C)
        t_new = 0.5 * (1 + math.sqrt(1 + 4 * t * t))
        z = a_new + (t - 1) / t_new * (a_new - a)
        a, t = a_new, t_new
    # polish: variables strictly inside the box solve the KKT equalities exactly
    tol = 1e-7 * C
    free = (a > tol) & (a < C - tol)
    upper = a >= C - tol
    a_pol = np.where(upper, C, 0.0)
    if free.any():
        f = np.flatnonzero(free)
        nf = f.size
        A = np.zeros((nf + 1, nf + 1))
        A[:nf, :nf] = Q[np.ix_(f, f)]
        A[:nf, nf] = y[f]
        A[nf, :nf] = y[f]
        rhs = np.concatenate([1.0 - Q[np.ix_(f, np.flatnonzero(upper))] @ a_pol[upper], [-y[upper] @ a_pol[upper]]])
        sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
        a_pol[f] = sol[:nf]
    obj = lambda v: 0.5 * v @ Q @ v - v.sum()  # noqa: E731
    if np.all(a_pol >= -1e-12) and np.all(a_pol <= C + 1e-12) and abs(y @ a_pol) < 1e-9 and obj(a_pol) <= obj(a):
        a = np.clip(a_pol, 0, C)
    return a, obj(a)


def kkt_violation(alpha, K, y, C):
    """Largest maximal-violating-pair gap of a dual point."""
    G = (y[:, None] * y[None, :] * K) @ alpha - 1.0
    v = -y * G
    up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
    low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
    return float(v[up].max() - v[low].min())


# ---------------------------------------------------------------------------
# multi-task GP by explicit dense inverse


def matern52_naive(a, b, ls):
    r = math.sqrt(sum((ai - bi) ** 2 for ai, bi in zip(a, b)))
    s = math.sqrt(5) * r / ls
    return (1 + s + s * s / 3) * math.exp(-s)


def mtgp_naive(X, tasks, y, imputed, Kt, ls, noise_var, mu, jitter_rel=1e-8):
    """Dense covariance built entry by entry; inverse via numpy.linalg.inv."""
    n = len(y)
    S = np.empty((n, n))
    for p in range(n):
        for q in range(n):
            S[p, q] = Kt[tasks[p], tasks[q]] * matern52_naive(X[p], X[q], ls)
    S += np.diag([noise_var[t] for t in tasks])
    S += jitter_rel * np.mean(np.diag(S)) * np.eye(n)
    Sinv = np.linalg.inv(S)
    r = np.array([0.0 if imputed[p] else y[p] - mu[tasks[p]] for p in range(n)])
    sign, logdet = np.linalg.slogdet(S)
    lml = -0.5 * r @ Sinv @ r - 0.5 * logdet - 0.5 * n * math.log(2 * math.pi)

    def predict(xs, task):
        k = np.array([Kt[task, tasks[p]] * matern52_naive(X[p], xs, ls) for p in range(n)])
        return mu[task] + k @ Sinv @ r, Kt[task, task] - k @ Sinv @ k

    return lml, predict


# ---------------------------------------------------------------------------
# expected improvement by Monte Carlo


def ei_monte_carlo(mean, sd, y_best, n=10**6, seed=0):
    """``E[max(0, y_best - f)]`` from `n` antithetic normal draws."""
    z = np.random.default_rng(seed).standard_normal(n // 2)
    f = mean + sd * np.concatenate([z, -z])
    return float(np.maximum(0.0, y_best - f).mean())


def normal_cdf(x):
    return 0.5 * (1 + erf(x / math.sqrt(2)))


def random_mtgp_problem(rng, M, N, block):
    """Random 2-D training set and hyperparameters.

    Block designs observe every task at the same N points; irregular ones
    draw a separate point set (1..N points) per task.
    Returns ``(points, tasks, y, Lt, ls, noise_var, mu)`` with 0-based tasks.
    """
    if block:
        P = rng.uniform(-3, 3, (N, 2))
        pts = np.vstack([P] * M)
        tasks = np.repeat(np.arange(M), N)
    else:
        counts = rng.integers(1, N + 1, M)
        pts = rng.uniform(-3, 3, (counts.sum(), 2))
        tasks = np.repeat(np.arange(M), counts)
        perm = rng.permutation(tasks.size)
        pts, tasks = pts[perm], tasks[perm]
    Lt = np.tril(rng.normal(0, 0.6, (M, M)), -1)
    Lt[np.diag_indices(M)] = rng.uniform(0.3, 1.5, M)
    ls = rng.uniform(0.5, 4.0)
    noise_var = 10 ** rng.uniform(-3, -1, M)
    mu = rng.normal(0, 1, M)
    y = rng.normal(0, 1.5, tasks.size) + mu[tasks]
    return pts, tasks, y, Lt, ls, noise_var, mu
