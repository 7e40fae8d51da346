"""Coregionalized multi-task Gaussian process regression.

Observations ``y`` of task ``i`` at input ``x`` follow

    f(x, i) ~ GP(mu_i, Kt[i, l] * k52(x, x')),   y = f(x, i) + N(0, sigma_i^2)

with ``k52`` the unit-amplitude Matérn 5/2 kernel and ``Kt = Lt Lt^T`` a
learned task covariance.  Two exact inference paths are provided:

* ``dense`` -- Cholesky of the full joint covariance, any design;
* ``kron`` -- eigendecompositions of ``Kt`` (whitened by the noise) and of
  the input kernel, valid when every task is observed at the same points.

With a single task the model is an ordinary GP with constant mean.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy import linalg
from scipy.optimize import minimize
from scipy.spatial.distance import cdist

from .errors import FactorizationFailure, FitFailure

SQRT5 = math.sqrt(5.0)
LOG_2PI = math.log(2 * math.pi)
BOX = (-3.0, 3.0)
JITTER_REL = 1e-8
JITTER_ESCALATIONS = 3


def matern52(a, b, length_scale: float) -> float:
    r = float(np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)))
    s = SQRT5 * r / length_scale
    return (1.0 + s + s * s / 3.0) * math.exp(-s)


def _matern_from_dist(r: np.ndarray, length_scale: float) -> np.ndarray:
    s = SQRT5 * r / length_scale
    return (1.0 + s + s * s / 3.0) * np.exp(-s)


def _matern_and_dlogl(r: np.ndarray, length_scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Kernel values and their derivative with respect to log(length_scale)."""
    s = SQRT5 * r / length_scale
    e = np.exp(-s)
    s2 = s * s / 3.0
    return (1.0 + s + s2) * e, s2 * (1.0 + s) * e


def _inv_from_cholesky(L: np.ndarray) -> np.ndarray:
    # L has a zero upper triangle, so dpotri's output is lower-triangular
    inv, info = linalg.lapack.dpotri(L, lower=1)
    if info != 0:
        raise FactorizationFailure("inverse from Cholesky factor failed")
    full = inv + inv.T
    np.einsum("ii->i", full)[:] *= 0.5
    return full


def matern52_matrix(A, B, length_scale: float) -> np.ndarray:
    return _matern_from_dist(cdist(np.atleast_2d(A), np.atleast_2d(B)), length_scale)


# ---------------------------------------------------------------------------
# observations


@dataclass(frozen=True)
class Observation:
    point: tuple[float, ...]
    task: int  # 1-based
    y: float
    imputed: bool = False

    def __post_init__(self):
        object.__setattr__(self, "point", tuple(float(v) for v in np.ravel(self.point)))
        if not math.isfinite(self.y):
            raise ValueError("observation value must be finite")


class ObservationSet:
    """Ordered observations of `num_tasks` tasks.

    Repeated (point, task) pairs are allowed: the noise term keeps the joint
    covariance non-singular, and a BO loop may revisit a point.
    """

    def __init__(self, observations, num_tasks: int):
        self.observations = tuple(observations)
        self.num_tasks = int(num_tasks)
        if self.num_tasks < 1:
            raise ValueError("num_tasks must be >= 1")
        for o in self.observations:
            if not 1 <= o.task <= self.num_tasks:
                raise ValueError(f"task {o.task} outside 1..{self.num_tasks}")
        n = len(self.observations)
        d = len(self.observations[0].point) if n else 2
        self.X = np.array([o.point for o in self.observations], dtype=np.float64).reshape(n, d)
        self.tasks = np.array([o.task - 1 for o in self.observations], dtype=np.int64)
        self.y = np.array([o.y for o in self.observations], dtype=np.float64)
        self.imputed = np.array([o.imputed for o in self.observations], dtype=bool)

    def __len__(self) -> int:
        return len(self.observations)

    def __iter__(self):
        return iter(self.observations)

    def add(self, *obs: Observation) -> "ObservationSet":
        return ObservationSet(self.observations + tuple(obs), self.num_tasks)

    def for_task(self, task: int) -> "ObservationSet":
        return ObservationSet([o for o in self.observations if o.task == task], self.num_tasks)

    def unique_points(self) -> list[tuple[float, ...]]:
        """Distinct points in order of first appearance."""
        return list(dict.fromkeys(o.point for o in self.observations))

    def block_layout(self):
        """``(points, index)`` if every task is observed exactly once at every point, else None.

        ``index[k]`` is the position of observation k in task-major order
        ``task * N + point``.
        """
        if not self.observations:
            return None
        points = self.unique_points()
        pos = {p: j for j, p in enumerate(points)}
        N = len(points)
        if len(self.observations) != N * self.num_tasks:
            return None
        index = np.array([o_t * N + pos[o.point] for o, o_t in zip(self.observations, self.tasks)])
        if np.unique(index).size != index.size:
            return None
        return np.array(points, dtype=np.float64), index

    @property
    def design(self) -> str:
        return "block" if self.block_layout() is not None else "irregular"

    def best(self, task: int | None = None) -> float:
        mask = ~self.imputed
        if task is not None:
            mask &= self.tasks == task - 1
        return float(self.y[mask].min())


# ---------------------------------------------------------------------------
# hyperparameters


@lru_cache(maxsize=None)
def _tril(M: int):
    rows, cols = np.tril_indices(M)
    for a in (rows, cols):
        a.setflags(write=False)
    diag = rows == cols
    diag.setflags(write=False)
    return rows, cols, diag


@dataclass(frozen=True, eq=False)
class MTGPHyperparams:
    mu: np.ndarray
    Lt: np.ndarray
    log_length_scale: float
    log_noise: np.ndarray  # log sigma_i

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        Lt = np.tril(np.atleast_2d(np.asarray(self.Lt, dtype=np.float64)))
        ln = np.atleast_1d(np.asarray(self.log_noise, dtype=np.float64))
        M = mu.size
        if Lt.shape != (M, M) or ln.size != M:
            raise ValueError("inconsistent task count across hyperparameters")
        if np.any(np.diag(Lt) <= 0):
            raise ValueError("Lt must have a positive diagonal")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "Lt", Lt)
        object.__setattr__(self, "log_noise", ln)
        object.__setattr__(self, "log_length_scale", float(self.log_length_scale))

    @property
    def num_tasks(self) -> int:
        return self.mu.size

    @property
    def task_cov(self) -> np.ndarray:
        return self.Lt @ self.Lt.T

    @property
    def length_scale(self) -> float:
        return math.exp(self.log_length_scale)

    @property
    def noise_var(self) -> np.ndarray:
        return np.exp(2 * self.log_noise)

    def to_vector(self) -> np.ndarray:
        rows, cols, diag = _tril(self.num_tasks)
        L = self.Lt[rows, cols]
        L[diag] = np.log(L[diag])
        return np.concatenate([self.mu, L, [self.log_length_scale], self.log_noise])

    @classmethod
    def from_vector(cls, v, num_tasks: int) -> "MTGPHyperparams":
        M = num_tasks
        v = np.asarray(v, dtype=np.float64)
        k = M * (M + 1) // 2
        rows, cols, diag = _tril(M)
        vals = v[M:M + k].copy()
        vals[diag] = np.exp(vals[diag])
        Lt = np.zeros((M, M))
        Lt[rows, cols] = vals
        if np.any(vals[diag] <= 0):
            raise ValueError("Lt must have a positive diagonal")
        # already validated and lower-triangular; skip __post_init__
        out = object.__new__(cls)
        for name, val in (("mu", v[:M].copy()), ("Lt", Lt), ("log_length_scale", float(v[M + k])),
                          ("log_noise", v[M + k + 1:].copy())):
            object.__setattr__(out, name, val)
        return out

    def to_dict(self) -> dict:
        return {
            "mu": self.mu.tolist(),
            "Lt": self.Lt.tolist(),
            "log_length_scale": self.log_length_scale,
            "log_noise": self.log_noise.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "MTGPHyperparams":
        return cls(d["mu"], d["Lt"], d["log_length_scale"], d["log_noise"])


def cross_task_kernel(a, i: int, b, l: int, params: MTGPHyperparams) -> float:
    """``Kt[i, l] * k52(a, b)`` with 1-based task indices."""
    return float(params.task_cov[i - 1, l - 1]) * matern52(a, b, params.length_scale)


# ---------------------------------------------------------------------------
# joint covariance and likelihood


def _jitter(diag_mean: float) -> float:
    return JITTER_REL * diag_mean


def _residuals(train: ObservationSet, mu: np.ndarray) -> np.ndarray:
    # imputed entries stand for the prior mean itself, whatever mu currently is
    r = train.y - mu[train.tasks]
    r[train.imputed] = 0.0
    return r


def joint_covariance(train: ObservationSet, params: MTGPHyperparams, method: str = "auto") -> np.ndarray:
    """Joint covariance of the training observations, in observation order, jitter included.

    Block designs are assembled as ``Kt (x) Kx + D (x) I``; other designs
    entrywise.  Both give bit-identical matrices on block designs.
    """
    Kt = params.task_cov
    noise = params.noise_var
    layout = train.block_layout() if method in ("auto", "kron") else None
    if method == "kron" and layout is None:
        raise ValueError("kron assembly needs a block design")
    if layout is not None:
        points, index = layout
        N = points.shape[0]
        Kx = matern52_matrix(points, points, params.length_scale)
        full = np.kron(Kt, Kx) + np.kron(np.diag(noise), np.eye(N))
        S = full[np.ix_(index, index)]
    else:
        t = train.tasks
        S = Kt[np.ix_(t, t)] * matern52_matrix(train.X, train.X, params.length_scale)
        S[np.diag_indices_from(S)] += noise[t]
    S[np.diag_indices_from(S)] += _jitter(float(np.mean(np.diag(S))))
    return S


def _cholesky(S: np.ndarray, jitter: float) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of `S` (which already carries `jitter`).

    On failure the jitter is escalated 10x, at most three times.  Returns the
    factor and the total jitter on the diagonal.
    """
    total = jitter
    for attempt in range(JITTER_ESCALATIONS + 1):
        try:
            L = linalg.cholesky(S + (total - jitter) * np.eye(S.shape[0]), lower=True, check_finite=False)
            return L, total
        except linalg.LinAlgError:
            total = jitter * 10 ** (attempt + 1)
    raise FactorizationFailure("joint covariance not positive definite after jitter escalation")


class _DenseFactor:
    """Cholesky path for arbitrary designs."""

    method = "dense"

    def __init__(self, train: ObservationSet, params: MTGPHyperparams, dist=None):
        self.train = train
        self.params = params
        self.dist = cdist(train.X, train.X) if dist is None else dist
        Kt = params.task_cov
        t = train.tasks
        self.Kx, self.dKx = _matern_and_dlogl(self.dist, params.length_scale)
        S = Kt[np.ix_(t, t)] * self.Kx
        d = np.einsum("ii->i", S)  # writable view on the diagonal
        d += params.noise_var[t]
        jit = _jitter(float(d.mean()))
        d += jit
        self.L, self.jitter = _cholesky(S, jit)
        self.resid = _residuals(train, params.mu)
        self.alpha = linalg.cho_solve((self.L, True), self.resid, check_finite=False)

    def lml(self) -> float:
        n = self.resid.size
        return float(-0.5 * self.resid @ self.alpha - np.log(np.diag(self.L)).sum() - 0.5 * n * LOG_2PI)

    def grad(self) -> np.ndarray:
        p, tr = self.params, self.train
        M, n = p.num_tasks, len(tr)
        t = tr.tasks
        W = np.outer(self.alpha, self.alpha) - _inv_from_cholesky(self.L)
        E = np.zeros((n, M))
        E[np.arange(n), t] = 1.0
        G_kt = 0.5 * E.T @ (W * self.Kx) @ E
        g_ls = 0.5 * np.sum(p.task_cov * (E.T @ (W * self.dKx) @ E))
        g_noise = p.noise_var * np.bincount(t, weights=np.diag(W), minlength=M)
        a = np.where(tr.imputed, 0.0, self.alpha)
        g_mu = np.bincount(t, weights=a, minlength=M)
        return _pack_grad(p, G_kt, g_mu, g_ls, g_noise)

    def predict(self, Xs: np.ndarray, task: int) -> tuple[np.ndarray, np.ndarray]:
        p, tr = self.params, self.train
        Kt = p.task_cov
        ks = Kt[task - 1, tr.tasks][:, None] * matern52_matrix(tr.X, Xs, p.length_scale)
        mean = p.mu[task - 1] + ks.T @ self.alpha
        v = linalg.solve_triangular(self.L, ks, lower=True, check_finite=False)
        var = Kt[task - 1, task - 1] - np.sum(v * v, axis=0)
        return mean, var

    def extend(self, obs) -> "_DenseFactor":
        """Append observations by bordering the Cholesky factor (hyperparameters and jitter unchanged)."""
        new = self.train.add(*obs)
        p = self.params
        m = len(obs)
        n = len(self.train)
        Xn = new.X[n:]
        tn = new.tasks[n:]
        Kt = p.task_cov
        d_cross = cdist(self.train.X, Xn)
        d_new = cdist(Xn, Xn)
        B = Kt[np.ix_(self.train.tasks, tn)] * _matern_from_dist(d_cross, p.length_scale)
        Cn = Kt[np.ix_(tn, tn)] * _matern_from_dist(d_new, p.length_scale)
        Cn[np.diag_indices(m)] += p.noise_var[tn] + self.jitter
        L21 = linalg.solve_triangular(self.L, B, lower=True, check_finite=False).T
        schur = Cn - L21 @ L21.T
        try:
            L22 = linalg.cholesky(schur, lower=True, check_finite=False)
        except linalg.LinAlgError:
            return _DenseFactor(new, p)
        out = object.__new__(_DenseFactor)
        out.train, out.params, out.jitter = new, p, self.jitter
        out.dist = np.block([[self.dist, d_cross], [d_cross.T, d_new]])
        out.Kx, out.dKx = _matern_and_dlogl(out.dist, p.length_scale)
        out.L = np.block([[self.L, np.zeros((n, m))], [L21, L22]])
        out.resid = _residuals(new, p.mu)
        out.alpha = linalg.cho_solve((out.L, True), out.resid, check_finite=False)
        return out


class _KronFactor:
    """Eigendecomposition path for block designs.

    With ``Dj`` the noise (plus jitter) per task, ``A = Dj^-1/2 U`` where
    ``U Lam U^T = Dj^-1/2 Kt Dj^-1/2`` and ``V S V^T = Kx``:

        Sigma^-1 = (A (x) V) diag(1 / (Lam (x) S + 1)) (A (x) V)^T
    """

    method = "kron"

    def __init__(self, train: ObservationSet, params: MTGPHyperparams, layout=None, dist=None):
        layout = train.block_layout() if layout is None else layout
        if layout is None:
            raise ValueError("kron path needs a block design")
        self.train, self.params = train, params
        self.points, self.index = layout
        M, N = params.num_tasks, self.points.shape[0]
        self.dist = cdist(self.points, self.points) if dist is None else dist
        Kt = params.task_cov
        self.Kx, self.dKx = _matern_and_dlogl(self.dist, params.length_scale)
        noise = params.noise_var
        self.jitter = _jitter(float(np.mean(np.diag(Kt) + noise)))
        self.Dj = noise + self.jitter
        dh = 1.0 / np.sqrt(self.Dj)
        lam, U = linalg.eigh(dh[:, None] * Kt * dh[None, :])
        s, V = linalg.eigh(self.Kx)
        self.lam = np.clip(lam, 0.0, None)
        self.s = np.clip(s, 0.0, None)
        self.A = dh[:, None] * U
        self.V = V
        self.C = 1.0 / (np.outer(self.lam, self.s) + 1.0)
        r = np.empty(M * N)
        r[self.index] = _residuals(train, params.mu)
        self.R = r.reshape(M, N)
        self.alpha_mat = self.A @ (self.C * (self.A.T @ self.R @ self.V)) @ self.V.T
        self.alpha = self.alpha_mat.ravel()[self.index]

    def lml(self) -> float:
        M, N = self.R.shape
        logdet = N * np.log(self.Dj).sum() + np.log(np.outer(self.lam, self.s) + 1.0).sum()
        return float(-0.5 * np.sum(self.R * self.alpha_mat) - 0.5 * logdet - 0.5 * M * N * LOG_2PI)

    def grad(self) -> np.ndarray:
        p = self.params
        am, A, C = self.alpha_mat, self.A, self.C
        Kt = p.task_cov
        quad_kt = am @ self.Kx @ am.T
        trace_kt = (A * (C @ self.s)) @ A.T
        G_kt = 0.5 * (quad_kt - trace_kt)
        dKx = self.dKx
        vdv = np.einsum("ps,pq,qs->s", self.V, dKx, self.V)
        akta = np.einsum("am,ab,bm->m", A, Kt, A)
        g_ls = 0.5 * (np.sum(Kt * (am @ dKx @ am.T)) - akta @ C @ vdv)
        g_noise = p.noise_var * (np.sum(am**2, axis=1) - (A**2) @ C.sum(axis=1))
        imp = np.zeros(am.size, dtype=bool)
        imp[self.index] = self.train.imputed
        g_mu = np.where(imp.reshape(am.shape), 0.0, am).sum(axis=1)
        return _pack_grad(p, G_kt, g_mu, g_ls, g_noise)

    def predict(self, Xs: np.ndarray, task: int) -> tuple[np.ndarray, np.ndarray]:
        p = self.params
        Kt = p.task_cov
        kxs = matern52_matrix(self.points, Xs, p.length_scale)
        mean = p.mu[task - 1] + Kt[task - 1] @ (self.alpha_mat @ kxs)
        P = (self.A.T @ Kt[:, task - 1]) ** 2
        Z = (self.V.T @ kxs) ** 2
        var = Kt[task - 1, task - 1] - P @ self.C @ Z
        return mean, var

    def extend(self, obs):
        return _make_factor(self.train.add(*obs), self.params, "auto")


def _pack_grad(p: MTGPHyperparams, G_kt, g_mu, g_ls, g_noise) -> np.ndarray:
    G_L = (G_kt + G_kt.T) @ p.Lt
    rows, cols, diag = _tril(p.num_tasks)
    gL = G_L[rows, cols]
    gL[diag] *= p.Lt[rows[diag], cols[diag]]
    return np.concatenate([g_mu, gL, [g_ls], g_noise])


def _make_factor(train: ObservationSet, params: MTGPHyperparams, method: str = "auto"):
    if params.num_tasks != train.num_tasks:
        raise ValueError("hyperparameters and observations disagree on task count")
    if method == "dense":
        return _DenseFactor(train, params)
    layout = train.block_layout() if params.num_tasks > 1 else None
    if method == "kron" or (method == "auto" and layout is not None):
        return _KronFactor(train, params, layout)
    return _DenseFactor(train, params)


def log_marginal_likelihood(train: ObservationSet, params: MTGPHyperparams, method: str = "auto") -> float:
    return _make_factor(train, params, method).lml()


def lml_gradient(train: ObservationSet, params: MTGPHyperparams, method: str = "auto") -> np.ndarray:
    """Gradient of the log marginal likelihood with respect to ``params.to_vector()``.

    The jitter is treated as a constant.
    """
    return _make_factor(train, params, method).grad()


# ---------------------------------------------------------------------------
# model


class MTGPModel:
    """A fitted (or explicitly parameterized) model; immutable after construction."""

    def __init__(self, train: ObservationSet, params: MTGPHyperparams, method: str = "auto", _factor=None):
        self.train = train
        self.params = params
        self._factor = _factor if _factor is not None else _make_factor(train, params, method)
        self.method = self._factor.method
        self.lml = self._factor.lml()

    @property
    def num_tasks(self) -> int:
        return self.params.num_tasks

    @property
    def alpha(self) -> np.ndarray:
        return self._factor.alpha

    def predict(self, X, task: int, floor: bool = True) -> tuple[np.ndarray, np.ndarray]:
        """Posterior mean and variance of ``f(x, task)`` for each row of `X`."""
        Xs = np.atleast_2d(np.asarray(X, dtype=np.float64))
        mean, var = self._factor.predict(Xs, task)
        if floor:
            var = np.maximum(var, 0.0)
        return mean, var

    def extend(self, *obs: Observation) -> "MTGPModel":
        """Condition on extra observations without refitting hyperparameters."""
        factor = self._factor.extend(obs)
        return MTGPModel(factor.train, self.params, _factor=factor)

    def to_json(self) -> str:
        return json.dumps({
            "params": self.params.to_dict(),
            "num_tasks": self.num_tasks,
            "method": self.method,
            "observations": [
                {"point": list(o.point), "task": o.task, "y": o.y, "imputed": o.imputed}
                for o in self.train
            ],
        })

    @classmethod
    def from_json(cls, text: str) -> "MTGPModel":
        d = json.loads(text)
        obs = [Observation(tuple(o["point"]), o["task"], o["y"], o.get("imputed", False)) for o in d["observations"]]
        return cls(ObservationSet(obs, d["num_tasks"]), MTGPHyperparams.from_dict(d["params"]), d.get("method", "auto"))


def predict(model: MTGPModel, x, task: int) -> tuple[float, float]:
    mean, var = model.predict(np.atleast_2d(x), task)
    return float(mean[0]), float(var[0])


def impute_missing(train: ObservationSet, params: MTGPHyperparams) -> ObservationSet:
    """Fill every missing (point, task) pair with that task's prior mean, flagged ``imputed``."""
    have = {(o.point, o.task) for o in train}
    extra = [
        Observation(pt, t, float(params.mu[t - 1]), imputed=True)
        for pt in train.unique_points()
        for t in range(1, train.num_tasks + 1)
        if (pt, t) not in have
    ]
    return train.add(*extra) if extra else train


# ---------------------------------------------------------------------------
# maximum-likelihood fitting


@dataclass(frozen=True)
class FitOptions:
    restarts: int = 5
    maxiter: int = 300
    ftol: float = 1e-10
    gtol: float = 1e-6
    method: str = "auto"
    length_scale_bounds: tuple[float, float] = (0.05, 30.0)


def _data_scale(train: ObservationSet) -> float:
    y = train.y[~train.imputed]
    s = float(np.std(y)) if y.size > 1 else 0.0
    return s if s > 1e-8 else 1.0


def default_init(train: ObservationSet) -> MTGPHyperparams:
    """Task sample means, std-scaled identity Lt, half-diagonal length-scale, 10% noise."""
    M = train.num_tasks
    s = _data_scale(train)
    real = ~train.imputed
    mu = np.empty(M)
    sd = np.empty(M)
    for t in range(M):
        yt = train.y[real & (train.tasks == t)]
        mu[t] = yt.mean() if yt.size else train.y[real].mean()
        sd[t] = yt.std() if yt.size > 1 and yt.std() > 1e-8 else s
    half_diag = 0.5 * math.hypot(BOX[1] - BOX[0], BOX[1] - BOX[0])
    return MTGPHyperparams(mu, s * np.eye(M), math.log(half_diag), np.log(0.1 * sd))


def _bounds(train: ObservationSet, opts: FitOptions) -> list[tuple]:
    M = train.num_tasks
    s = _data_scale(train)
    rows, cols = np.tril_indices(M)
    b = [(None, None)] * M
    for r, c in zip(rows, cols):
        b.append((math.log(1e-3 * s), math.log(1e3 * s)) if r == c else (-1e3 * s, 1e3 * s))
    b.append(tuple(math.log(v) for v in opts.length_scale_bounds))
    b += [(math.log(1e-4 * s), math.log(10 * s))] * M
    return b


def _random_init(train: ObservationSet, rng: np.random.Generator) -> MTGPHyperparams:
    base = default_init(train)
    M = train.num_tasks
    s = _data_scale(train)
    Lt = np.tril(rng.normal(0.0, 0.5 * s, (M, M)), -1)
    Lt[np.diag_indices(M)] = s * rng.uniform(0.3, 3.0, M)
    log_ls = math.log(rng.uniform(0.3, 5.0))
    log_noise = np.log(s * 10 ** rng.uniform(-3.0, -0.5, M))
    return MTGPHyperparams(base.mu, Lt, log_ls, log_noise)


def fit(train: ObservationSet, restarts: int = 5, seed: int = 0, init: MTGPHyperparams | None = None,
        options: FitOptions | None = None) -> MTGPModel:
    """Maximize the log marginal likelihood with L-BFGS-B from several starts.

    Starts are the default initialization, then `init` (a warm start) if
    given, then seeded random draws, `restarts` in total.

    Raises
    ------
    FitFailure
        If no start yields a factorizable optimum.
    """
    opts = replace(options or FitOptions(), restarts=restarts)
    M = train.num_tasks
    if len(train) == 0:
        raise FitFailure("no observations")
    rng = np.random.default_rng(seed)
    starts = [default_init(train)]
    if init is not None and init.num_tasks == M:
        starts.append(init)
    while len(starts) < max(1, opts.restarts):
        starts.append(_random_init(train, rng))

    bounds = _bounds(train, opts)
    layout = train.block_layout() if M > 1 and opts.method != "dense" else None
    use_kron = opts.method == "kron" or (opts.method == "auto" and layout is not None)
    dist = cdist(layout[0], layout[0]) if use_kron else cdist(train.X, train.X)

    def factor(v):
        p = MTGPHyperparams.from_vector(v, M)
        if use_kron:
            return _KronFactor(train, p, layout, dist)
        return _DenseFactor(train, p, dist)

    def objective(v):
        try:
            f = factor(v)
            val, g = -f.lml(), -f.grad()
        except (FactorizationFailure, ValueError, linalg.LinAlgError):
            return 1e25, np.zeros_like(v)
        if not (np.isfinite(val) and np.all(np.isfinite(g))):
            return 1e25, np.zeros_like(v)
        return val, g

    best_v, best_val = None, np.inf
    for p0 in starts:
        v0 = np.clip(p0.to_vector(), [lo if lo is not None else -np.inf for lo, _ in bounds],
                     [hi if hi is not None else np.inf for _, hi in bounds])
        res = minimize(objective, v0, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": opts.maxiter, "ftol": opts.ftol, "gtol": opts.gtol})
        if np.isfinite(res.fun) and res.fun < 1e24 and res.fun < best_val:
            best_v, best_val = res.x, res.fun
    if best_v is None:
        raise FitFailure("all restarts failed to factorize")
    params = MTGPHyperparams.from_vector(best_v, M)
    return MTGPModel(train, params, "kron" if use_kron else "dense")
