"""Fixed-bin-number intensity discretization inside a region of interest.

Intensities are binned against ``N_g - 1`` equally spaced edges between the
lower and upper quantization bounds ``q0`` and ``qN``::

    q_l = q0 + (qN - q0) * l / N_g,   l = 1 .. N_g - 1

and a voxel receives the smallest level ``l`` with ``I <= q_l`` (level
``N_g`` if it exceeds every edge).  Values outside ``[q0, qN]`` therefore
clamp into levels 1 and ``N_g``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import DegenerateRange

__all__ = [
    "IntensityVolume",
    "VoxelMask",
    "MinMax",
    "MeanPlusMinusSD",
    "DiscretizationStrategy",
    "DiscretizedROI",
    "compute_range",
    "bin_edges",
    "discretize",
    "discretize_values",
    "strategy_grid",
]


def _as_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise ValueError(f"dims must be 3 positive integers, got {dims}")
    return dims


@dataclass(frozen=True, eq=False)
class IntensityVolume:
    """Dense 3D intensity grid indexed ``data[x, y, z]``.

    On disk the voxels are stored x-fastest, which is Fortran order for an
    array of shape ``dims``.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError("volume data must be 3-dimensional")
        _as_dims(data.shape)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume intensities must be finite")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError("spacing must be 3 positive reals")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @classmethod
    def from_flat(cls, dims, flat, spacing=(1.0, 1.0, 1.0)) -> "IntensityVolume":
        dims = _as_dims(dims)
        flat = np.asarray(flat, dtype=np.float64).ravel()
        if flat.size != np.prod(dims):
            raise ValueError("data length does not match dims")
        return cls(flat.reshape(dims, order="F"), spacing)


@dataclass(frozen=True, eq=False)
class VoxelMask:
    """Boolean region-of-interest flags on the same grid as a volume."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data).astype(bool)
        if data.ndim != 3:
            raise ValueError("mask data must be 3-dimensional")
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    @property
    def count(self) -> int:
        return int(self.data.sum())

    @classmethod
    def from_flat(cls, dims, flat) -> "VoxelMask":
        dims = _as_dims(dims)
        flat = np.asarray(flat).ravel()
        if flat.size != np.prod(dims):
            raise ValueError("mask length does not match dims")
        return cls(flat.reshape(dims, order="F") != 0)


@dataclass(frozen=True)
class MinMax:
    """Quantization range spanning the ROI minimum and maximum."""

    def label(self) -> str:
        return "min-max"


@dataclass(frozen=True)
class MeanPlusMinusSD:
    """Quantization range ``mean -/+ k * sd`` of the ROI intensities."""

    k: float

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError("k must be positive")

    def label(self) -> str:
        return f"mean ± {self.k:g}SD"


RangeRule = Union[MinMax, MeanPlusMinusSD]


@dataclass(frozen=True)
class DiscretizationStrategy:
    num_bins: int
    range_rule: RangeRule = field(default_factory=MinMax)

    def __post_init__(self):
        if int(self.num_bins) != self.num_bins or self.num_bins < 2:
            raise ValueError("num_bins must be an integer >= 2")

    def label(self) -> str:
        return f"N={self.num_bins}, {self.range_rule.label()}"


@dataclass(frozen=True, eq=False)
class DiscretizedROI:
    """Levels of the masked voxels, in x-fastest scan order."""

    strategy: DiscretizationStrategy
    levels: np.ndarray
    mask: np.ndarray
    q0: float
    qN: float

    @property
    def num_levels(self) -> int:
        return self.strategy.num_bins

    def level_grid(self) -> np.ndarray:
        """Integer grid with the ROI levels and 0 outside the mask."""
        grid = np.zeros(self.mask.shape, dtype=np.int64)
        # Fortran-order views keep x-fastest scan order consistent with `levels`.
        grid.T[self.mask.T] = self.levels
        return grid


def masked_values(vol: IntensityVolume, mask: VoxelMask) -> np.ndarray:
    """Masked intensities in x-fastest, then y, then z order."""
    if vol.dims != mask.dims:
        raise ValueError(f"volume dims {vol.dims} != mask dims {mask.dims}")
    return vol.data.T[mask.data.T]


def _range_of(values: np.ndarray, rule: RangeRule) -> tuple[float, float]:
    if values.size < 2:
        raise ValueError("at least 2 masked voxels are required")
    if isinstance(rule, MinMax):
        q0, qN = float(values.min()), float(values.max())
    elif isinstance(rule, MeanPlusMinusSD):
        mean = float(values.mean())
        sd = float(values.std(ddof=1))
        q0, qN = mean - rule.k * sd, mean + rule.k * sd
    else:
        raise TypeError(f"unknown range rule {rule!r}")
    if not q0 < qN:
        raise DegenerateRange(f"quantization range collapsed: q0 = qN = {q0}")
    return q0, qN


def compute_range(vol: IntensityVolume, mask: VoxelMask, rule: RangeRule) -> tuple[float, float]:
    """Quantization bounds ``(q0, qN)`` of the masked intensities under `rule`.

    Raises
    ------
    DegenerateRange
        If the bounds coincide (constant ROI, or zero standard deviation).
    """
    return _range_of(masked_values(vol, mask), rule)


def bin_edges(q0: float, qN: float, num_bins: int) -> np.ndarray:
    """Interior bin edges ``q_1 .. q_{N_g - 1}``."""
    if not q0 < qN:
        raise ValueError("q0 must be strictly below qN")
    if num_bins < 2:
        raise ValueError("num_bins must be >= 2")
    ell = np.arange(1, num_bins, dtype=np.float64)
    return q0 + (qN - q0) * ell / num_bins


def discretize_values(values, q0: float, qN: float, num_bins: int) -> np.ndarray:
    edges = bin_edges(q0, qN, num_bins)
    # side="left" places a value equal to q_l in bin l, i.e. q_{l-1} < I <= q_l.
    return np.searchsorted(edges, np.asarray(values, dtype=np.float64), side="left") + 1


def discretize(vol: IntensityVolume, mask: VoxelMask, strategy: DiscretizationStrategy) -> DiscretizedROI:
    values = masked_values(vol, mask)
    q0, qN = _range_of(values, strategy.range_rule)
    levels = discretize_values(values, q0, qN, strategy.num_bins)
    return DiscretizedROI(strategy, levels, mask.data.copy(), q0, qN)


def strategy_grid() -> list[DiscretizationStrategy]:
    """The nine strategies: bin count outer, range rule varying fastest."""
    rules = (MinMax(), MeanPlusMinusSD(2.0), MeanPlusMinusSD(3.0))
    return [DiscretizationStrategy(n, rule) for n in (16, 32, 64) for rule in rules]
