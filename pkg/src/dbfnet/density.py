"""Probability densities on uniform rectangular grids.

All density arithmetic happens in the log domain. A density is stored as log
values on the cell centers of a :class:`StateGrid`; sums of cell values times
the cell volume stand in for integrals (midpoint rule). Construction always
normalizes, then clamps every cell to a tiny positivity floor so that log
ratios stay finite everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.special import logsumexp

from .errors import AllZero, GridMismatch, OutOfBounds

POSITIVITY_FLOOR = 1e-300
LOG_FLOOR = float(np.log(POSITIVITY_FLOOR))
_MASS_TOL = 1e-9


@dataclass(frozen=True)
class StateGrid:
    """Uniform rectangular grid over a box, with cell-centered points.

    Args:
        lower: lower bound per dimension.
        upper: upper bound per dimension.
        points: number of cells per dimension (at least 2 each).
    """

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    points: tuple[int, ...]

    def __post_init__(self) -> None:
        lower = tuple(float(v) for v in self.lower)
        upper = tuple(float(v) for v in self.upper)
        points = tuple(int(n) for n in self.points)
        if not (len(lower) == len(upper) == len(points)) or len(lower) == 0:
            raise ValueError("lower, upper and points must share one nonzero length")
        if any(not np.isfinite(v) for v in lower + upper):
            raise ValueError("grid bounds must be finite")
        if any(u <= l for l, u in zip(lower, upper)):
            raise ValueError("each upper bound must exceed its lower bound")
        if any(n < 2 for n in points):
            raise ValueError("need at least 2 points per dimension")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "points", points)

    @property
    def ndim(self) -> int:
        return len(self.points)

    @cached_property
    def n_cells(self) -> int:
        return int(np.prod(self.points))

    @cached_property
    def widths(self) -> np.ndarray:
        return (np.asarray(self.upper) - np.asarray(self.lower)) / np.asarray(self.points)

    @cached_property
    def cell_volume(self) -> float:
        return float(np.prod(self.widths))

    @cached_property
    def axes(self) -> tuple[np.ndarray, ...]:
        out = []
        for lo, w, n in zip(self.lower, self.widths, self.points):
            out.append(lo + (np.arange(n) + 0.5) * w)
        return tuple(out)

    @cached_property
    def cells(self) -> np.ndarray:
        """All cell centers as an (n_cells, ndim) array in C order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def contains(self, point: np.ndarray) -> bool:
        p = np.asarray(point, dtype=float)
        return bool(np.all(p >= self.lower) and np.all(p <= self.upper))

    def cell_index(self, points: np.ndarray) -> np.ndarray:
        """Flat cell indices for points, clipping to the boundary cells."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        rel = (p - np.asarray(self.lower)) / self.widths
        idx = np.clip(np.floor(rel).astype(int), 0, np.asarray(self.points) - 1)
        flat = np.ravel_multi_index(tuple(idx.T), self.points)
        return flat if np.asarray(points).ndim > 1 else flat[0]

    def locate(self, point: np.ndarray) -> int:
        """Flat cell index of a point, raising OutOfBounds outside the box."""
        if not self.contains(point):
            raise OutOfBounds(f"point {np.asarray(point)} outside grid box")
        return int(self.cell_index(np.asarray(point)))

    def point_at(self, flat_index: int) -> np.ndarray:
        return self.cells[int(flat_index)].copy()

    def log_interp(self, log_values: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Multilinear interpolation of a per-cell field at arbitrary points.

        Queries are clamped to the span of cell centers, so points at or past
        the boundary read the nearest edge cell.  Interpolating log values
        keeps a locally quadratic log-density smooth between cell centers.
        """
        p = np.atleast_2d(np.asarray(points, dtype=float))
        field = np.asarray(log_values).reshape(self.points)
        n = np.asarray(self.points)
        rel = (p - np.asarray(self.lower)) / self.widths - 0.5
        rel = np.clip(rel, 0.0, n - 1.0)
        base = np.minimum(rel.astype(int), n - 2)
        frac = rel - base
        out = np.zeros(p.shape[0])
        for corner in range(1 << self.ndim):
            weight = np.ones(p.shape[0])
            idx = []
            for axis in range(self.ndim):
                bit = (corner >> axis) & 1
                idx.append(base[:, axis] + bit)
                weight = weight * (frac[:, axis] if bit else 1.0 - frac[:, axis])
            out += weight * field[tuple(idx)]
        return out if np.asarray(points).ndim > 1 else out[0]


def _check_same_grid(*objs) -> None:
    g = objs[0].grid
    for o in objs[1:]:
        if o.grid != g:
            raise GridMismatch("operands live on different grids")


@dataclass(frozen=True, eq=False)
class DensityGrid:
    """A normalized, floored probability density over a StateGrid."""

    grid: StateGrid
    log_values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        lv = np.asarray(self.log_values, dtype=float).reshape(-1)
        if lv.shape[0] != self.grid.n_cells:
            raise ValueError("log_values length does not match grid size")
        if np.any(np.isnan(lv)):
            raise ValueError("log density contains NaN")
        if lv.min() < LOG_FLOOR - 1e-9:
            raise ValueError("density below positivity floor")
        mass = float(np.exp(logsumexp(lv))) * self.grid.cell_volume
        if abs(mass - 1.0) > _MASS_TOL:
            raise ValueError(f"density integrates to {mass!r}, not 1")
        lv.flags.writeable = False
        object.__setattr__(self, "log_values", lv)

    @classmethod
    def from_log(cls, grid: StateGrid, log_values: np.ndarray) -> "DensityGrid":
        """Normalize unnormalized log values and apply the positivity floor."""
        return cls(grid, floor_and_normalize(grid, np.asarray(log_values, dtype=float)))

    @classmethod
    def from_values(cls, grid: StateGrid, values: np.ndarray) -> "DensityGrid":
        vals = np.asarray(values, dtype=float)
        if np.any(vals < 0) or np.any(np.isnan(vals)):
            raise ValueError("density values must be nonnegative and not NaN")
        with np.errstate(divide="ignore"):
            return cls.from_log(grid, np.log(vals))

    @classmethod
    def uniform(cls, grid: StateGrid) -> "DensityGrid":
        return cls.from_log(grid, np.zeros(grid.n_cells))

    @classmethod
    def gaussian(cls, grid: StateGrid, mean, cov) -> "DensityGrid":
        """Density proportional to a (possibly truncated) Gaussian on the grid."""
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        diff = grid.cells - mean
        sol = np.linalg.solve(cov, diff.T).T
        return cls.from_log(grid, -0.5 * np.einsum("ij,ij->i", diff, sol))

    @cached_property
    def values(self) -> np.ndarray:
        v = np.exp(self.log_values)
        v.flags.writeable = False
        return v

    def integral(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)

    def mean(self) -> np.ndarray:
        return (self.values[:, None] * self.grid.cells).sum(axis=0) * self.grid.cell_volume

    def allclose(self, other: "DensityGrid", atol: float = 1e-12) -> bool:
        _check_same_grid(self, other)
        return bool(np.allclose(self.log_values, other.log_values, atol=atol, rtol=0))


def floor_and_normalize(grid: StateGrid, log_values: np.ndarray) -> np.ndarray:
    """Normalize log values on a grid, then clamp cells to the positivity floor.

    Raises AllZero when no cell carries any mass.
    """
    lv = np.asarray(log_values, dtype=float).reshape(-1)
    if lv.shape[0] != grid.n_cells:
        raise ValueError("log_values length does not match grid size")
    if np.any(np.isnan(lv)):
        raise ValueError("log density contains NaN")
    log_mass = logsumexp(lv)
    if not np.isfinite(log_mass):
        raise AllZero("density has no mass to normalize")
    lv = lv - (log_mass + np.log(grid.cell_volume))
    lv = np.maximum(lv, LOG_FLOOR)
    lv = lv - (logsumexp(lv) + np.log(grid.cell_volume))
    return np.maximum(lv, LOG_FLOOR)


def normalize(grid: StateGrid, raw_values: np.ndarray) -> DensityGrid:
    """Build a normalized density from raw nonnegative cell values."""
    return DensityGrid.from_values(grid, raw_values)


def l1_distance(p: DensityGrid, q: DensityGrid) -> float:
    """Grid L1 distance, sum of absolute cell differences times cell volume."""
    _check_same_grid(p, q)
    return float(np.abs(p.values - q.values).sum() * p.grid.cell_volume)


def tv_distance(p: DensityGrid, q: DensityGrid) -> float:
    """Total variation distance, exactly half the L1 distance."""
    return 0.5 * l1_distance(p, q)


def kl_divergence(p: DensityGrid, q: DensityGrid) -> float:
    """KL divergence of p from q on the grid, nonnegative."""
    _check_same_grid(p, q)
    val = float((p.values * (p.log_values - q.log_values)).sum() * p.grid.cell_volume)
    return max(0.0, val)


def find_psi(p: DensityGrid, q: DensityGrid) -> np.ndarray:
    """Cell center where p and q are closest, the anchor for log ratios.

    Ties resolve to the lowest flat cell index, so identical densities anchor
    at the first grid point.
    """
    _check_same_grid(p, q)
    idx = int(np.argmin(np.abs(p.values - q.values)))
    return p.grid.point_at(idx)


@dataclass(frozen=True, eq=False)
class LogRatioField:
    """Log of a density against its value at an anchor point psi."""

    grid: StateGrid
    values: np.ndarray = field(repr=False)
    psi: tuple[float, ...]

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float).reshape(-1)
        if v.shape[0] != self.grid.n_cells:
            raise ValueError("values length does not match grid size")
        anchor = self.grid.locate(np.asarray(self.psi))
        if abs(v[anchor]) > 1e-9:
            raise ValueError("log ratio must vanish at the anchor cell")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "psi", tuple(float(x) for x in self.psi))

    def to_density(self) -> DensityGrid:
        """Invert the representation: exponentiate and renormalize."""
        return DensityGrid.from_log(self.grid, self.values)


def log_ratio(p: DensityGrid, psi: np.ndarray) -> LogRatioField:
    """Log ratio field of p anchored at the cell containing psi."""
    anchor = p.grid.locate(np.asarray(psi))
    vals = p.log_values - p.log_values[anchor]
    return LogRatioField(p.grid, vals, tuple(np.asarray(psi, dtype=float)))


@dataclass(frozen=True, eq=False)
class ParticleSet:
    """Weighted particles over the state space."""

    states: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        states = np.atleast_2d(np.asarray(self.states, dtype=float))
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if states.shape[0] != weights.shape[0] or states.shape[0] < 1:
            raise ValueError("need one weight per particle and at least one particle")
        if np.any(weights < 0) or np.any(np.isnan(weights)):
            raise ValueError("weights must be nonnegative")
        total = weights.sum()
        if not np.isfinite(total) or total <= 0:
            raise AllZero("particle weights sum to zero")
        weights = weights / total
        states.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "weights", weights)

    @property
    def count(self) -> int:
        return self.states.shape[0]

    def mean(self) -> np.ndarray:
        return self.weights @ self.states


def systematic_indices(weights: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Systematic resampling index vector with a single uniform offset."""
    cum = np.cumsum(weights)
    cum = cum / cum[-1]
    positions = (rng.uniform() + np.arange(count)) / count
    return np.searchsorted(cum, positions, side="left")


def resample(ps: ParticleSet, count: int, rng_seed) -> ParticleSet:
    """Systematic resample to ``count`` equally weighted particles.

    ``rng_seed`` is either an integer seed or a numpy Generator.
    """
    if count < 1:
        raise ValueError("count must be positive")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(int(rng_seed))
    idx = systematic_indices(ps.weights, count, rng)
    return ParticleSet(ps.states[idx], np.full(count, 1.0 / count))
