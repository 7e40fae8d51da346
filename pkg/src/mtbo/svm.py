"""RBF-kernel soft-margin SVM, stratified k-fold CV loss, and the tan loss transform.

The dual

    min_a  1/2 a^T Q a - e^T a,   0 <= a_i <= C,   y^T a = 0,
    Q_ij = y_i y_j exp(-gamma * ||x_i - x_j||^2)

is solved by SMO with maximal-violating-pair working-set selection.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.spatial.distance import cdist

from .errors import NonConvergence

HP_MIN, HP_MAX = 1e-3, 1e3
LOSS_EPS = 1e-3
KKT_TOL = 1e-3
# iteration cap expressed as a kernel-entry budget; each SMO step reads two kernel columns
KERNEL_EVAL_BUDGET = 10**6

_TAU = 1e-12


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    case_ids: tuple = ()
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        y = np.asarray(self.labels).astype(np.int64).ravel()
        if X.shape[0] != y.size:
            raise ValueError("features and labels disagree on sample count")
        if not np.isin(y, (-1, 1)).all():
            raise ValueError("labels must be -1 or +1")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")
        ids = tuple(self.case_ids) if len(self.case_ids) else tuple(range(y.size))
        if len(ids) != y.size:
            raise ValueError("case_ids length mismatch")
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "case_ids", ids)

    def __len__(self) -> int:
        return self.labels.size

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.labels[idx], tuple(self.case_ids[i] for i in idx), self.feature_names)


@dataclass(frozen=True)
class SVMHyperparams:
    C: float
    gamma: float

    def __post_init__(self):
        for name in ("C", "gamma"):
            v = getattr(self, name)
            if not HP_MIN * (1 - 1e-12) <= v <= HP_MAX * (1 + 1e-12):
                raise ValueError(f"{name}={v} outside [{HP_MIN}, {HP_MAX}]")

    @classmethod
    def from_log10(cls, point) -> "SVMHyperparams":
        return cls(float(10.0 ** point[0]), float(10.0 ** point[1]))


@dataclass(frozen=True, eq=False)
class SVMModel:
    support_coeffs: np.ndarray  # alpha_i * y_i of the support vectors
    support_points: np.ndarray
    bias: float
    gamma: float
    alpha: np.ndarray = field(repr=False)  # full dual vector, training order
    n_iter: int = 0
    kkt_gap: float = 0.0

    def decision_function(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if self.support_points.shape[0] == 0:
            return np.full(X.shape[0], self.bias)
        K = rbf_kernel(X, self.support_points, self.gamma)
        # rounded products, then sum: BLAS fused multiply-add would break exact ties
        return (K * self.support_coeffs).sum(axis=1) + self.bias


def rbf_kernel(A, B, gamma: float) -> np.ndarray:
    return np.exp(-gamma * cdist(A, B, "sqeuclidean"))


@numba.njit(cache=True, nogil=True)
def _smo(K, y, C, tol, max_iter):
    n = y.shape[0]
    alpha = np.zeros(n)
    G = -np.ones(n)
    it = 0
    gap = np.inf
    while True:
        gmax = -np.inf
        gmin = np.inf
        i = -1
        j = -1
        for t in range(n):
            v = -y[t] * G[t]
            if (y[t] > 0 and alpha[t] < C) or (y[t] < 0 and alpha[t] > 0):
                if v > gmax:
                    gmax = v
                    i = t
            if (y[t] > 0 and alpha[t] > 0) or (y[t] < 0 and alpha[t] < C):
                if v < gmin:
                    gmin = v
                    j = t
        gap = gmax - gmin
        if i < 0 or j < 0 or gap < tol:
            return alpha, G, it, gap, True
        if it >= max_iter:
            return alpha, G, it, gap, False
        it += 1

        yi = y[i]
        yj = y[j]
        ai_old = alpha[i]
        aj_old = alpha[j]
        quad = K[i, i] + K[j, j] - 2.0 * K[i, j]
        if quad <= 0:
            quad = _TAU
        if yi != yj:
            delta = (-G[i] - G[j]) / quad
            diff = alpha[i] - alpha[j]
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = diff
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = -diff
            if diff > 0:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = C - diff
            else:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = C + diff
        else:
            delta = (G[i] - G[j]) / quad
            s = alpha[i] + alpha[j]
            alpha[i] -= delta
            alpha[j] += delta
            if s > C:
                if alpha[i] > C:
                    alpha[i] = C
                    alpha[j] = s - C
            else:
                if alpha[j] < 0:
                    alpha[j] = 0.0
                    alpha[i] = s
            if s > C:
                if alpha[j] > C:
                    alpha[j] = C
                    alpha[i] = s - C
            else:
                if alpha[i] < 0:
                    alpha[i] = 0.0
                    alpha[j] = s

        dai = alpha[i] - ai_old
        daj = alpha[j] - aj_old
        for t in range(n):
            G[t] += y[t] * (yi * K[t, i] * dai + yj * K[t, j] * daj)


def _bias(alpha, G, y, C) -> float:
    yG = y * G
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = yG[free].mean()
    else:
        ub, lb = np.inf, -np.inf
        for t in range(y.size):
            at_upper = alpha[t] >= C
            at_lower = alpha[t] <= 0
            if (at_upper and y[t] < 0) or (at_lower and y[t] > 0):
                ub = min(ub, yG[t])
            elif (at_upper and y[t] > 0) or (at_lower and y[t] < 0):
                lb = max(lb, yG[t])
        rho = (ub + lb) / 2
    return float(-rho)


def dual_objective(alpha, K, y) -> float:
    """``1/2 a^T Q a - sum(a)`` for the given Gram matrix and labels."""
    ay = alpha * y
    return float(0.5 * ay @ K @ ay - alpha.sum())


def train_svm(data: Dataset, hp: SVMHyperparams, tol: float = KKT_TOL, max_iter: int | None = None) -> SVMModel:
    """Fit the soft-margin dual by SMO.

    `data` is used as given; standardize features beforehand.

    Raises
    ------
    NonConvergence
        If the iteration cap is reached with a KKT gap still above `tol`.
    """
    X, y = data.features, data.labels.astype(np.float64)
    n = y.size
    if np.unique(y).size < 2:
        raise ValueError("both classes must be present")
    K = rbf_kernel(X, X, hp.gamma)
    if max_iter is None:
        max_iter = max(KERNEL_EVAL_BUDGET // (2 * n), 100)
    alpha, G, n_iter, gap, ok = _smo(K, y, float(hp.C), float(tol), int(max_iter))
    if not ok:
        raise NonConvergence(f"SMO stopped after {n_iter} iterations with KKT gap {gap:.3g}")
    sv = alpha > 0
    return SVMModel(
        support_coeffs=(alpha * y)[sv],
        support_points=X[sv].copy(),
        bias=_bias(alpha, G, y, hp.C),
        gamma=hp.gamma,
        alpha=alpha,
        n_iter=int(n_iter),
        kkt_gap=float(gap),
    )


def predict(model: SVMModel, X) -> np.ndarray:
    """Class labels; a decision value of exactly 0 maps to +1."""
    return np.where(model.decision_function(X) >= 0, 1, -1)


@dataclass(frozen=True)
class CVConfig:
    k: int = 10
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("k must be >= 2")
        if not self.stratified:
            raise ValueError("only stratified folds are supported")


def fold_assignment(data: Dataset, cv: CVConfig) -> np.ndarray:
    """Fold index per row, a function of (case_id, label, seed) only.

    Cases are sorted by id, shuffled within each class by the seed and dealt
    round-robin to folds, continuing the count across classes.
    """
    order = sorted(range(len(data)), key=lambda t: str(data.case_ids[t]))
    rng = np.random.default_rng(cv.seed)
    folds = np.empty(len(data), dtype=np.int64)
    offset = 0
    for cls in (-1, 1):
        members = np.array([t for t in order if data.labels[t] == cls], dtype=np.int64)
        members = members[rng.permutation(members.size)]
        folds[members] = (offset + np.arange(members.size)) % cv.k
        offset += members.size
    return folds


def standardize(train: np.ndarray, other: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """z-score both arrays with `train` statistics; constant columns are only centred."""
    mu = train.mean(axis=0)
    sd = train.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (train - mu) / sd, (other - mu) / sd


@dataclass(frozen=True)
class CVResult:
    loss: float
    n_errors: int
    flags: tuple[str, ...] = ()


def cross_validate(data: Dataset, hp: SVMHyperparams, cv: CVConfig) -> CVResult:
    folds = fold_assignment(data, cv)
    errors = 0
    for f in range(cv.k):
        val = folds == f
        if not val.any():
            continue
        tr = ~val
        Xtr, Xval = standardize(data.features[tr], data.features[val])
        ytr = data.labels[tr]
        if np.unique(ytr).size < 2:
            # degenerate fold: predict the only class seen
            errors += int((data.labels[val] != ytr[0]).sum())
            continue
        try:
            model = train_svm(Dataset(Xtr, ytr), hp)
        except NonConvergence:
            return CVResult(1.0, len(data), ("NonConvergence",))
        errors += int((predict(model, Xval) != data.labels[val]).sum())
    return CVResult(errors / len(data), errors)


def cv_loss(data: Dataset, hp: SVMHyperparams, cv: CVConfig) -> float:
    """Pooled k-fold misclassification rate (1.0 if any fold fails to converge)."""
    return cross_validate(data, hp, cv).loss


def transform_loss(L):
    """``tan(pi * L - pi / 2)`` after clamping `L` to ``[eps, 1 - eps]``."""
    L = np.clip(L, LOSS_EPS, 1 - LOSS_EPS)
    out = np.tan(np.pi * L - np.pi / 2)
    return float(out) if np.ndim(out) == 0 else out


def inverse_transform(f):
    L = np.clip((np.arctan(f) + np.pi / 2) / np.pi, LOSS_EPS, 1 - LOSS_EPS)
    return float(L) if np.ndim(L) == 0 else L


def read_dataset_csv(path) -> Dataset:
    """Read ``case_id,label,<features...>``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["case_id", "label"]:
            raise ValueError(f"{path}: header must start with case_id,label")
        ids, labels, rows = [], [], []
        for row in reader:
            ids.append(row[0])
            labels.append(int(float(row[1])))
            rows.append([float(v) for v in row[2:]])
    return Dataset(np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 2), np.array(labels), tuple(ids), tuple(header[2:]))


def write_dataset_csv(path, data: Dataset) -> None:
    names = data.feature_names or tuple(f"f{t}" for t in range(data.features.shape[1]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "label", *names])
        for cid, lab, row in zip(data.case_ids, data.labels, data.features):
            w.writerow([cid, int(lab), *(repr(float(v)) for v in row)])
