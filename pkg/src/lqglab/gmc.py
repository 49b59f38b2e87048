"""Circle-average regularized GMC area and boundary-length measures."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dc_field

import numpy as np

from .core import Grid, LqgParams
from .errors import OutOfRangeError, PreconditionError, ResolutionError
from .fields import GridField, circle_average_field


@dataclass(frozen=True, eq=False)
class GmcMeasure:
    """Cell masses (``kind="area"``, shape ``(ny, nx)``) or boundary-segment masses
    (``kind="boundary"``, one per boundary cell, ordered by real part)."""

    kind: str
    epsilon: float
    cell_mass: np.ndarray = dc_field(repr=False)
    gamma: float
    grid: Grid = dc_field(repr=False)

    @property
    def total(self) -> float:
        return float(self.cell_mass.sum())

    def region_mass(self, mask) -> float:
        if self.kind != "area":
            raise PreconditionError("region masses need an area measure")
        return float(self.cell_mass[np.asarray(mask, bool)].sum())

    @property
    def segment_x(self) -> np.ndarray:
        return self.grid.cell_point(self.grid.boundary_cells).real


def _check_eps(field: GridField, epsilon: float):
    if epsilon < 2 * field.grid.spacing * (1 - 1e-12):
        raise ResolutionError(f"epsilon {epsilon:g} below resolution 2*spacing")


def area_measure(field: GridField, params: LqgParams, epsilon: float) -> GmcMeasure:
    """``eps^{gamma^2/2} exp(gamma h_eps) spacing^2`` per cell."""
    _check_eps(field, epsilon)
    g = params.gamma
    h = circle_average_field(field, epsilon)
    s2 = field.grid.spacing ** 2
    mass = np.where(field.grid.mask, epsilon ** (g * g / 2) * np.exp(g * h) * s2, 0.0)
    return GmcMeasure("area", float(epsilon), mass, g, field.grid)


def boundary_measure(field: GridField, params: LqgParams, epsilon: float) -> GmcMeasure:
    """``eps^{gamma^2/4} exp(gamma h_eps / 2) spacing`` per boundary cell (semicircle averages)."""
    _check_eps(field, epsilon)
    if field.bc == "zero_boundary":
        raise PreconditionError("boundary measure needs a free-boundary field")
    grid = field.grid
    if grid.boundary_cells.size == 0:
        raise PreconditionError("grid has no boundary cells on the real axis")
    g = params.gamma
    h = circle_average_field(field, epsilon).ravel()[grid.boundary_cells]
    mass = epsilon ** (g * g / 4) * np.exp(g * h / 2) * grid.spacing
    return GmcMeasure("boundary", float(epsilon), mass, g, grid)


# --------------------------------------------------------------- diagnostics

@dataclass(frozen=True, eq=False)
class ConvergenceReport:
    eps_ladder: np.ndarray
    region_masses: np.ndarray  # (n_eps, n_regions)
    deltas: np.ndarray  # (n_eps - 1, n_regions)

    @property
    def sup_deltas(self) -> np.ndarray:
        return self.deltas.max(axis=1)

    @property
    def decreasing_fraction(self) -> float:
        if self.deltas.shape[0] < 2:
            return 1.0
        return float(np.mean(np.all(np.diff(self.deltas, axis=0) <= 0, axis=0)))

    @property
    def non_cauchy(self) -> bool:
        return bool(self.decreasing_fraction < 0.5)


def tiling_labels(grid: Grid, n: int = 8) -> np.ndarray:
    """Region index of each cell in an ``n x n`` tiling of the grid."""
    rows = np.minimum((np.arange(grid.ny) * n) // grid.ny, n - 1)
    cols = np.minimum((np.arange(grid.nx) * n) // grid.nx, n - 1)
    return rows[:, None] * n + cols[None, :]


def convergence_diagnostic(field: GridField, params: LqgParams, eps_ladder,
                           tiles: int = 8) -> ConvergenceReport:
    """Region masses along a dyadic ladder and relative Cauchy deltas per halving."""
    eps = np.sort(np.asarray(eps_ladder, dtype=float))[::-1]
    if len(eps) > 1 and not np.allclose(eps[:-1] / eps[1:], 2.0):
        raise PreconditionError("eps ladder must be dyadic")
    labels = tiling_labels(field.grid, tiles).ravel()
    masses = []
    for e in eps:
        m = area_measure(field, params, e).cell_mass.ravel()
        masses.append(np.bincount(labels, weights=m, minlength=tiles * tiles))
    masses = np.array(masses)
    with np.errstate(invalid="ignore", divide="ignore"):
        deltas = np.abs(masses[:-1] - masses[1:]) / masses[:-1]
    return ConvergenceReport(eps, masses, np.nan_to_num(deltas))


# ---------------------------------------------------------- boundary length

class BoundaryCoordinate:
    """Monotone map ``x -> nu([x0, x])`` over the boundary segments of a measure.

    Segment ``k`` is ``[x_k - s/2, x_k + s/2]``, carrying its mass uniformly.
    """

    def __init__(self, measure: GmcMeasure):
        if measure.kind != "boundary":
            raise PreconditionError("boundary_length_coordinate needs a boundary measure")
        s = measure.grid.spacing
        x = measure.segment_x
        self.edges = np.concatenate([[x[0] - s / 2], x + s / 2])
        self.cumulative = np.concatenate([[0.0], np.cumsum(measure.cell_mass)])
        self.max_segment = float(measure.cell_mass.max())

    @property
    def x0(self) -> float:
        return float(self.edges[0])

    @property
    def total(self) -> float:
        return float(self.cumulative[-1])

    def __call__(self, x):
        return np.interp(x, self.edges, self.cumulative)

    def inverse(self, length: float, tol: float | None = None) -> float:
        if length < 0 or length > self.total * (1 + 1e-12):
            raise OutOfRangeError(f"length {length:g} outside [0, {self.total:g}]")
        lo, hi = self.edges[0], self.edges[-1]
        if length <= 0:
            return float(lo)
        tol = tol if tol is not None else 1e-12 * (hi - lo)
        while hi - lo > tol:
            mid = 0.5 * (lo + hi)
            if self(mid) < length:
                lo = mid
            else:
                hi = mid
        return float(0.5 * (lo + hi))

    def interval_mass(self, a: float, b: float) -> float:
        return float(self(b) - self(a))

    def midpoint(self, a: float, b: float) -> float:
        """The point ``w`` with ``nu([a, w]) = nu([w, b])``."""
        return self.inverse(0.5 * (self(a) + self(b)))


def boundary_length_coordinate(measure: GmcMeasure) -> BoundaryCoordinate:
    return BoundaryCoordinate(measure)


def write_csv(measure: GmcMeasure, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "epsilon", "mass"])
        if measure.kind == "area":
            flat = np.flatnonzero(measure.grid.mask.ravel())
            masses = measure.cell_mass.ravel()[flat]
        else:
            flat = measure.grid.boundary_cells
            masses = measure.cell_mass
        for i, m in zip(flat.tolist(), masses.tolist()):
            w.writerow([i, repr(measure.epsilon), repr(m)])
