"""First-order, GLCM and GLRLM features of a discretized region of interest.

Texture matrices use the 13 unique 3D neighbour directions at distance 1.
The co-occurrence matrix is symmetric and summed over directions before
normalization; the run-length matrix is summed over directions.  All
logarithms are base 2.  The exact formulas are listed in ``docs/features.md``.
"""

from __future__ import annotations

from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field

import numpy as np

from .discretize import DiscretizationStrategy, DiscretizedROI, IntensityVolume, VoxelMask, discretize, masked_values
from .errors import EmptyMatrix, UndefinedFeature

FIRST_ORDER_NAMES = (
    "mean", "var", "skewness", "kurtosis", "median", "min", "mad", "max",
    "range", "cov", "rms", "entropy", "uniformity",
)
GLCM_NAMES = (
    "autocorrelation", "cluster_prominence", "cluster_shade", "cluster_tendency",
    "contrast", "correlation", "difference_entropy", "difference_variance",
    "dissimilarity", "energy", "entropy", "homogeneity", "imc1", "imc2", "idm",
    "idmn", "idn", "inverse_variance", "maximum_probability", "mean",
    "sum_entropy", "sum_variance", "variance",
)
GLRLM_NAMES = (
    "gln", "hgre", "lre", "lrhge", "lrlge", "lgre", "n_runs", "rln", "rp",
    "sre", "srhge", "srlge",
)
FEATURE_NAMES = (
    tuple(f"firstorder_{n}" for n in FIRST_ORDER_NAMES)
    + tuple(f"glcm_{n}" for n in GLCM_NAMES)
    + tuple(f"glrlm_{n}" for n in GLRLM_NAMES)
)
# first-order features computed on raw intensities (everything but entropy/uniformity)
RAW_FIRST_ORDER = FEATURE_NAMES[:11]

DIRECTIONS = (
    (1, 0, 0), (0, 1, 0), (0, 0, 1),
    (1, 1, 0), (1, -1, 0), (1, 0, 1), (1, 0, -1), (0, 1, 1), (0, 1, -1),
    (1, 1, 1), (1, 1, -1), (1, -1, 1), (1, -1, -1),
)


@dataclass
class FeatureSet(Mapping):
    """Named feature values; undefined entries raise on access.

    ``values`` holds ``nan`` for every name listed in ``errors``.
    """

    values: dict[str, float]
    errors: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, name: str) -> float:
        if name in self.errors:
            raise UndefinedFeature(f"{name}: {self.errors[name]}")
        return self.values[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True, eq=False)
class FeatureVector:
    names: tuple[str, ...]
    values: np.ndarray
    errors: dict[str, str] = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return not self.errors and bool(np.all(np.isfinite(self.values)))

    def __getitem__(self, name: str) -> float:
        if name in self.errors:
            raise UndefinedFeature(f"{name}: {self.errors[name]}")
        return float(self.values[self.names.index(name)])

    def __len__(self) -> int:
        return len(self.names)


class _Collector:
    def __init__(self):
        self.values: dict[str, float] = {}
        self.errors: dict[str, str] = {}

    def put(self, name, fn):
        try:
            self.values[name] = float(fn())
        except UndefinedFeature as exc:
            self.values[name] = float("nan")
            self.errors[name] = str(exc)

    def result(self) -> FeatureSet:
        return FeatureSet(self.values, self.errors)


def _entropy2(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def _require(cond: bool, msg: str):
    if not cond:
        raise UndefinedFeature(msg)


def first_order_features(levels, raw, num_levels: int | None = None) -> FeatureSet:
    """Thirteen first-order statistics.

    Everything except ``entropy`` and ``uniformity`` is computed on the raw
    intensities; those two use the histogram of discretized levels.

    Parameters
    ----------
    levels : array of int or DiscretizedROI
        Discretized levels of the masked voxels.
    raw : array of float
        Raw masked intensities, same voxels as `levels`.
    """
    if isinstance(levels, DiscretizedROI):
        num_levels = levels.num_levels
        levels = levels.levels
    x = np.asarray(raw, dtype=np.float64).ravel()
    levels = np.asarray(levels).ravel()
    if x.size < 2:
        raise ValueError("at least 2 voxels are required")
    n = x.size
    mean = x.mean()
    dev = x - mean
    m2 = (dev**2).mean()
    var = (dev**2).sum() / (n - 1)
    sd = np.sqrt(var)

    counts = np.bincount(levels, minlength=(num_levels or 0) + 1)[1:]
    p = counts / counts.sum()

    c = _Collector()
    c.put("mean", lambda: mean)
    c.put("var", lambda: var)

    def skewness():
        _require(m2 > 0, "zero variance")
        return (dev**3).mean() / m2**1.5

    def kurtosis():
        _require(m2 > 0, "zero variance")
        return (dev**4).mean() / m2**2

    def cov():
        _require(mean != 0, "zero mean")
        return sd / mean

    c.put("skewness", skewness)
    c.put("kurtosis", kurtosis)
    c.put("median", lambda: np.median(x))
    c.put("min", lambda: x.min())
    c.put("mad", lambda: np.abs(dev).mean())
    c.put("max", lambda: x.max())
    c.put("range", lambda: x.max() - x.min())
    c.put("cov", cov)
    c.put("rms", lambda: np.sqrt((x**2).mean()))
    c.put("entropy", lambda: _entropy2(p))
    c.put("uniformity", lambda: (p**2).sum())
    return c.result()


def _crop(grid: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    idx = np.nonzero(mask)
    if idx[0].size == 0:
        raise EmptyMatrix("mask is empty")
    sl = tuple(slice(i.min(), i.max() + 1) for i in idx)
    return grid[sl], mask[sl]


def _pair_slices(shape, d):
    """Slices (src, dst) such that dst-voxel = src-voxel + d."""
    src, dst = [], []
    for n, o in zip(shape, d):
        if o > 0:
            src.append(slice(0, n - o))
            dst.append(slice(o, n))
        elif o < 0:
            src.append(slice(-o, n))
            dst.append(slice(0, n + o))
        else:
            src.append(slice(0, n))
            dst.append(slice(0, n))
    return tuple(src), tuple(dst)


@dataclass(frozen=True, eq=False)
class CooccurrenceMatrix:
    counts: np.ndarray

    @property
    def normalized(self) -> np.ndarray:
        return self.counts / self.counts.sum()


def compute_glcm(grid, mask=None, num_levels: int | None = None, directions=DIRECTIONS) -> CooccurrenceMatrix:
    """Symmetric, direction-summed co-occurrence counts at distance 1.

    `grid` holds levels ``1..N_g`` (values outside `mask` are ignored).  A
    :class:`DiscretizedROI` may be passed instead of ``grid, mask``.
    """
    if isinstance(grid, DiscretizedROI):
        num_levels = grid.num_levels
        grid, mask = grid.level_grid(), grid.mask
    grid = np.asarray(grid, dtype=np.int64)
    mask = grid > 0 if mask is None else np.asarray(mask, dtype=bool)
    grid, mask = _crop(grid, mask)
    ng = int(num_levels or grid[mask].max())
    counts = np.zeros(ng * ng, dtype=np.float64)
    for d in directions:
        src, dst = _pair_slices(grid.shape, d)
        valid = mask[src] & mask[dst]
        a = grid[src][valid] - 1
        b = grid[dst][valid] - 1
        counts += np.bincount(a * ng + b, minlength=ng * ng)
    counts = counts.reshape(ng, ng)
    counts = counts + counts.T
    if counts.sum() == 0:
        raise EmptyMatrix("no voxel pair inside the mask")
    return CooccurrenceMatrix(counts)


def glcm_features(m) -> FeatureSet:
    """Twenty-three Haralick-family features of a co-occurrence matrix."""
    p = m.normalized if isinstance(m, CooccurrenceMatrix) else np.asarray(m, dtype=np.float64)
    p = p / p.sum()
    ng = p.shape[0]
    i, j = np.meshgrid(np.arange(1, ng + 1), np.arange(1, ng + 1), indexing="ij")
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    lv = np.arange(1, ng + 1)
    mux = (lv * px).sum()
    muy = (lv * py).sum()
    sx2 = ((lv - mux) ** 2 * px).sum()
    sy2 = ((lv - muy) ** 2 * py).sum()

    absdiff = np.abs(i - j)
    p_diff = np.bincount(absdiff.ravel(), weights=p.ravel(), minlength=ng)
    p_sum = np.bincount((i + j).ravel(), weights=p.ravel(), minlength=2 * ng + 1)
    k_diff = np.arange(ng)
    k_sum = np.arange(2 * ng + 1)
    diff_avg = (k_diff * p_diff).sum()
    sum_avg = (k_sum * p_sum).sum()

    hxy = _entropy2(p.ravel())
    hx, hy = _entropy2(px), _entropy2(py)
    pxy = np.outer(px, py)
    nz = p > 0
    hxy1 = float(-(p[nz] * np.log2(pxy[nz])).sum())
    hxy2 = _entropy2(pxy.ravel())
    spread = i + j - mux - muy

    def correlation():
        _require(sx2 > 0 and sy2 > 0, "zero marginal variance")
        return ((i * j * p).sum() - mux * muy) / np.sqrt(sx2 * sy2)

    def imc1():
        hmax = max(hx, hy)
        return (hxy - hxy1) / hmax if hmax > 0 else 0.0

    def inverse_variance():
        k = k_diff[1:]
        return (p_diff[1:] / k**2).sum()

    c = _Collector()
    c.put("autocorrelation", lambda: (i * j * p).sum())
    c.put("cluster_prominence", lambda: (spread**4 * p).sum())
    c.put("cluster_shade", lambda: (spread**3 * p).sum())
    c.put("cluster_tendency", lambda: (spread**2 * p).sum())
    c.put("contrast", lambda: ((i - j) ** 2 * p).sum())
    c.put("correlation", correlation)
    c.put("difference_entropy", lambda: _entropy2(p_diff))
    c.put("difference_variance", lambda: ((k_diff - diff_avg) ** 2 * p_diff).sum())
    c.put("dissimilarity", lambda: (absdiff * p).sum())
    c.put("energy", lambda: (p**2).sum())
    c.put("entropy", lambda: hxy)
    c.put("homogeneity", lambda: (p / (1 + absdiff)).sum())
    c.put("imc1", imc1)
    c.put("imc2", lambda: np.sqrt(max(0.0, 1 - np.exp(-2 * (hxy2 - hxy)))))
    c.put("idm", lambda: (p / (1 + absdiff**2)).sum())
    c.put("idmn", lambda: (p / (1 + absdiff**2 / ng**2)).sum())
    c.put("idn", lambda: (p / (1 + absdiff / ng)).sum())
    c.put("inverse_variance", inverse_variance)
    c.put("maximum_probability", lambda: p.max())
    c.put("mean", lambda: mux)
    c.put("sum_entropy", lambda: _entropy2(p_sum))
    c.put("sum_variance", lambda: ((k_sum - sum_avg) ** 2 * p_sum).sum())
    c.put("variance", lambda: ((i - mux) ** 2 * p).sum())
    return c.result()


@dataclass(frozen=True, eq=False)
class RunLengthMatrix:
    """Run counts indexed ``[level - 1, length - 1]``.

    ``num_directions`` records how many per-direction matrices were summed.
    """

    counts: np.ndarray
    num_directions: int = 1

    @property
    def num_runs(self) -> int:
        return int(self.counts.sum())


def _shift_from(arr: np.ndarray, d) -> np.ndarray:
    """out[p] = arr[p + d], zero where p + d leaves the grid."""
    out = np.zeros_like(arr)
    src, dst = _pair_slices(arr.shape, d)
    out[src] = arr[dst]
    return out


def _direction_runs(grid: np.ndarray, mask: np.ndarray, d) -> tuple[np.ndarray, np.ndarray]:
    """Levels and lengths of all maximal runs along direction `d`."""
    nxt_level = _shift_from(grid, d)
    nxt_in = _shift_from(mask, d)
    cont = mask & nxt_in & (grid == nxt_level)
    back = tuple(-o for o in d)
    starts = mask & ~_shift_from(cont, back)
    length = mask.astype(np.int64)
    for _ in range(max(grid.shape)):
        new = mask + cont * _shift_from(length, d)
        if np.array_equal(new, length):
            break
        length = new
    return grid[starts], length[starts]


def compute_glrlm(grid, mask=None, num_levels: int | None = None, directions=DIRECTIONS) -> RunLengthMatrix:
    """Run-length matrix summed over `directions` (pass one direction for a single matrix).

    Runs are maximal sequences of equal level along a line; leaving the mask
    ends a run.
    """
    if isinstance(grid, DiscretizedROI):
        num_levels = grid.num_levels
        grid, mask = grid.level_grid(), grid.mask
    grid = np.asarray(grid, dtype=np.int64)
    mask = grid > 0 if mask is None else np.asarray(mask, dtype=bool)
    grid, mask = _crop(grid, mask)
    grid = np.where(mask, grid, 0)
    if isinstance(directions[0], int):
        directions = (tuple(directions),)
    ng = int(num_levels or grid[mask].max())
    runs = [_direction_runs(grid, mask, d) for d in directions]
    max_len = max(int(lengths.max()) for _, lengths in runs)
    counts = np.zeros((ng, max_len), dtype=np.int64)
    for levels, lengths in runs:
        np.add.at(counts, (levels - 1, lengths - 1), 1)
    return RunLengthMatrix(counts, len(directions))


def glrlm_features(m: RunLengthMatrix, num_voxels: int) -> FeatureSet:
    """Twelve Galloway-family run-length features.

    ``rp`` is the number of runs divided by the number of voxels traversed,
    i.e. ``num_voxels * m.num_directions``.
    """
    P = np.asarray(m.counts, dtype=np.float64)
    nr = P.sum()
    if nr <= 0:
        raise EmptyMatrix("run-length matrix has no runs")
    g = np.arange(1, P.shape[0] + 1, dtype=np.float64)[:, None]
    r = np.arange(1, P.shape[1] + 1, dtype=np.float64)[None, :]
    c = _Collector()
    c.put("gln", lambda: (P.sum(axis=1) ** 2).sum() / nr)
    c.put("hgre", lambda: (P * g**2).sum() / nr)
    c.put("lre", lambda: (P * r**2).sum() / nr)
    c.put("lrhge", lambda: (P * g**2 * r**2).sum() / nr)
    c.put("lrlge", lambda: (P * r**2 / g**2).sum() / nr)
    c.put("lgre", lambda: (P / g**2).sum() / nr)
    c.put("n_runs", lambda: nr)
    c.put("rln", lambda: (P.sum(axis=0) ** 2).sum() / nr)
    c.put("rp", lambda: nr / (num_voxels * m.num_directions))
    c.put("sre", lambda: (P / r**2).sum() / nr)
    c.put("srhge", lambda: (P * g**2 / r**2).sum() / nr)
    c.put("srlge", lambda: (P / (g**2 * r**2)).sum() / nr)
    return c.result()


def features_from_roi(roi: DiscretizedROI, raw) -> FeatureVector:
    """All 48 features of a discretized ROI; undefined entries are ``nan`` and listed in ``errors``."""
    values: list[float] = []
    errors: dict[str, str] = {}

    def absorb(prefix, names, make):
        try:
            fs = make()
        except EmptyMatrix as exc:
            fs = FeatureSet({n: float("nan") for n in names}, {n: str(exc) for n in names})
        for n in names:
            values.append(fs.values[n])
            if n in fs.errors:
                errors[f"{prefix}_{n}"] = fs.errors[n]

    absorb("firstorder", FIRST_ORDER_NAMES, lambda: first_order_features(roi, raw))
    absorb("glcm", GLCM_NAMES, lambda: glcm_features(compute_glcm(roi)))
    absorb("glrlm", GLRLM_NAMES, lambda: glrlm_features(compute_glrlm(roi), roi.levels.size))
    return FeatureVector(FEATURE_NAMES, np.array(values), errors)


def extract_all(vol: IntensityVolume, mask: VoxelMask, strategy: DiscretizationStrategy) -> FeatureVector:
    """Discretize under `strategy` and compute the 48-feature vector.

    Raises
    ------
    DegenerateRange
        If the ROI cannot be discretized (e.g. constant intensities).
    """
    roi = discretize(vol, mask, strategy)
    return features_from_roi(roi, masked_values(vol, mask))
