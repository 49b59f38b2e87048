"""Lattice Gaussian free fields, quantum wedges/cones/beads, and circle averages.

Normalization: a lattice field with precision ``L / (2 pi)`` (``L`` the graph
Laplacian) has covariance ``2 pi L^{-1}``, whose off-diagonal decay is
``-log|x - y|`` plus a constant. This matches the continuum convention at
every spacing, since the two-dimensional Dirichlet energy is scale free.

Radial refinement: for free-boundary, whole-plane and cone fields the
average process around the normalization centre is an exact Brownian path
sampled on a fine log-radius ladder, while the lateral part comes from the
lattice. Point evaluation adds the radial profile analytically in ``|z|``, so
semicircle (or circle) averages at the centre follow the continuum process
below lattice resolution.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np
import scipy.fft as sfft
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.signal import fftconvolve

from .core import Grid, LqgParams, bilinear
from .errors import (ConditioningError, ParameterDomainError, PreconditionError,
                     ResolutionError, RetryExhaustedError, UnsupportedCombinationError)

BCS = ("zero_boundary", "free_boundary", "whole_plane_mod_const")
NORMALIZATIONS = ("none", "semicircle_avg_at_origin_zero", "circle_avg_at_origin_zero")
DENSE_LIMIT = 6000
RADIAL_DT = 2e-5


@dataclass(frozen=True, eq=False)
class RadialPart:
    """Radial profile added to a lattice field around ``center``.

    ``profile(t)`` with ``t = log(1/|z - center|)`` is added on top of the
    lattice part. ``process`` holds the exact average process on ``t``.
    """

    center: complex
    kind: str  # "semicircle", "circle", or "vertical" (strip columns)
    t: np.ndarray
    profile: np.ndarray
    process: np.ndarray
    nodes: int = 0

    def profile_at(self, z):
        r = np.abs(np.asarray(z, dtype=complex) - self.center)
        with np.errstate(divide="ignore"):
            tz = -np.log(r)
        return np.interp(tz, self.t, self.profile)


@dataclass(frozen=True, eq=False)
class GridField:
    grid: Grid
    values: np.ndarray = dc_field(repr=False)
    bc: str = "free_boundary"
    normalization: str = "none"
    provenance: str = "gff"
    gamma: float = float("nan")
    radial: RadialPart | None = dc_field(default=None, repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(self.grid.shape)
        v = np.where(self.grid.mask, v, 0.0)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.bc not in BCS:
            raise PreconditionError(f"unknown boundary condition {self.bc!r}")
        if self.normalization not in NORMALIZATIONS:
            raise PreconditionError(f"unknown normalization {self.normalization!r}")

    @property
    def _planar_radial(self) -> bool:
        return self.radial is not None and self.radial.kind in ("semicircle", "circle")

    def lattice_part(self) -> np.ndarray:
        if not self._planar_radial:
            return self.values
        return self.values - np.where(self.grid.mask, self.radial.profile_at(self.grid.points), 0.0)

    def evaluate(self, z):
        """Field at points ``z``: bilinear on the lattice part plus the radial profile."""
        z = np.asarray(z, dtype=complex)
        vals, valid = bilinear(self.grid, self.lattice_part(), z)
        if self._planar_radial:
            vals = vals + self.radial.profile_at(z)
        return vals, valid

    def shifted(self, c) -> "GridField":
        """Field plus ``c`` (scalar or per-cell array); the radial profile is kept."""
        c = np.broadcast_to(np.asarray(c, dtype=float), self.grid.shape)
        return replace(self, values=self.values + c)

    def restricted(self, mask) -> "GridField":
        return replace(self, grid=self.grid.with_mask(self.grid.mask & np.asarray(mask, bool)))


def constant_field(grid: Grid, c: float = 0.0, bc: str = "free_boundary",
                   gamma: float = float("nan")) -> GridField:
    return GridField(grid, np.full(grid.shape, float(c)), bc=bc,
                     provenance="deterministic", gamma=gamma)


# --------------------------------------------------------- lattice samplers

def _fast_len(n: int) -> int:
    return sfft.next_fast_len(int(n), real=True)


def _torus_multiplier(n0: int, n1: int) -> np.ndarray:
    """sqrt(2 pi / lambda) on the rfft grid of an n0 x n1 torus, zero mode removed."""
    k0 = 2 * np.pi * np.arange(n0) / n0
    k1 = 2 * np.pi * np.arange(n1 // 2 + 1) / n1
    lam = 4 - 2 * np.cos(k0)[:, None] - 2 * np.cos(k1)[None, :]
    lam[0, 0] = np.inf
    return np.sqrt(2 * np.pi / lam)


def torus_field(n0: int, n1: int, rng, count: int | None = None) -> np.ndarray:
    """Periodic lattice GFF with covariance ``2 pi L^+`` on an n0 x n1 torus."""
    shape = (n0, n1) if count is None else (count, n0, n1)
    noise = rng.standard_normal(shape)
    mult = _torus_multiplier(n0, n1)
    return sfft.irfft2(sfft.rfft2(noise, axes=(-2, -1)) * mult, s=(n0, n1), axes=(-2, -1))


def torus_kernel(n0: int, n1: int) -> np.ndarray:
    """Covariance kernel ``K(d) = 2 pi L^+(0, d)`` of :func:`torus_field`."""
    mult = _torus_multiplier(n0, n1)
    return sfft.irfft2(mult ** 2, s=(n0, n1))


def _whole_plane_lattice(grid: Grid, rng, pad: float = 2.0) -> np.ndarray:
    n0 = _fast_len(math.ceil(pad * grid.ny))
    n1 = _fast_len(math.ceil(pad * grid.nx))
    return torus_field(n0, n1, rng)[: grid.ny, : grid.nx]


def _reflected_rows(grid: Grid) -> int:
    j0 = grid.origin.imag / grid.spacing
    if abs(j0 - round(j0)) > 1e-9 or round(j0) != 0:
        raise PreconditionError("half-plane grid must have its bottom row on the real axis")
    return grid.ny


def _free_lattice_fft(grid: Grid, rng, pad: float = 2.0) -> np.ndarray:
    ny = _reflected_rows(grid)
    rows = 2 * ny - 1
    n0 = _fast_len(math.ceil(pad * rows))
    n1 = _fast_len(math.ceil(pad * grid.nx))
    g = torus_field(n0, n1, rng)
    up = g[:ny, : grid.nx]
    down = g[(-np.arange(ny)) % n0, : grid.nx]
    return (up + down) / math.sqrt(2.0)


def free_boundary_covariance(grid: Grid, pad: float = 2.0) -> np.ndarray:
    """Covariance matrix of in-mask cells for the reflected lattice field."""
    ny = _reflected_rows(grid)
    rows = 2 * ny - 1
    n0 = _fast_len(math.ceil(pad * rows))
    n1 = _fast_len(math.ceil(pad * grid.nx))
    K = torus_kernel(n0, n1)
    flat = np.flatnonzero(grid.mask.ravel())
    j, i = np.divmod(flat, grid.nx)
    di = (i[:, None] - i[None, :]) % n1
    dj = (j[:, None] - j[None, :]) % n0
    dr = (j[:, None] + j[None, :]) % n0
    return K[dj, di] + K[dr, di]


def _cholesky_jitter(C: np.ndarray):
    scale = float(np.mean(np.diag(C)))
    for jitter in (0.0, 1e-12, 1e-10, 1e-8, 1e-6, 1e-4):
        try:
            return sla.cholesky(C + jitter * scale * np.eye(len(C)), lower=True), jitter
        except np.linalg.LinAlgError:
            continue
    raise ConditioningError("covariance not positive definite after regularization",
                            jitter=1e-4 * scale)


_CHOL_CACHE: dict = {}


def _free_lattice_cholesky(grid: Grid, rng) -> np.ndarray:
    key = (grid.nx, grid.ny, grid.mask.tobytes())
    if key not in _CHOL_CACHE:
        _CHOL_CACHE.clear()
        _CHOL_CACHE[key] = _cholesky_jitter(free_boundary_covariance(grid))[0]
    Lc = _CHOL_CACHE[key]
    out = np.zeros(grid.size)
    out[np.flatnonzero(grid.mask.ravel())] = Lc @ rng.standard_normal(Lc.shape[0])
    return out.reshape(grid.shape)


# ------------------------------------------------------- radial refinement

def _fine_t_grid(t_lo: float, t_hi: float, dt: float) -> tuple[np.ndarray, int]:
    k_lo = math.floor(min(t_lo, 0.0) / dt)
    k_hi = math.ceil(max(t_hi, 0.0) / dt)
    t = dt * np.arange(k_lo, k_hi + 1)
    return t, -k_lo


def _two_sided_bm(t: np.ndarray, i0: int, rate: float, rng) -> np.ndarray:
    dt = np.diff(t)
    inc = rng.standard_normal(len(dt)) * np.sqrt(rate * dt)
    out = np.empty(len(t))
    out[i0] = 0.0
    out[i0 + 1:] = np.cumsum(inc[i0:])
    out[:i0] = -np.cumsum(inc[:i0][::-1])[::-1]
    return out


def _node_count(radius: float, kind: str, spacing: float) -> int:
    if kind == "semicircle":
        return max(65, int(math.ceil(4 * math.pi * radius / spacing)) + 1)
    return max(64, int(math.ceil(8 * math.pi * radius / spacing)))


def _arc_points(center: complex, r: np.ndarray, kind: str, spacing: float, n: int = 0):
    """Quadrature nodes and trapezoid weights for arcs of radii ``r``."""
    n = n or _node_count(float(np.max(r)), kind, spacing)
    if kind == "semicircle":
        theta = np.linspace(0.0, math.pi, n)
        w = np.full(n, 1.0)
        w[0] = w[-1] = 0.5
    else:
        theta = 2 * math.pi * np.arange(n) / n
        w = np.full(n, 1.0)
    w = w / w.sum()
    pts = center + np.asarray(r)[:, None] * np.exp(1j * theta)[None, :]
    return pts, w


def _lattice_averages(grid: Grid, values: np.ndarray, center: complex, radii: np.ndarray,
                      kind: str, n: int = 0) -> np.ndarray:
    pts, w = _arc_points(center, radii, kind, grid.spacing, n)
    vals, valid = bilinear(grid, values, pts)
    if not np.all(valid):
        raise PreconditionError("averaging arc leaves the grid")
    return vals @ w


def _max_radius(grid: Grid, center: complex, kind: str) -> float:
    x0, x1, y0, y1 = grid.extent
    c = complex(center)
    r = min(c.real - x0, x1 - c.real, y1 - c.imag)
    if kind == "circle":
        r = min(r, c.imag - y0)
    return r * (1 - 1e-9)


def _refine(grid: Grid, lattice: np.ndarray, center: complex, kind: str, process: np.ndarray,
            t: np.ndarray) -> tuple[np.ndarray, RadialPart]:
    """Swap the lattice's radial part around ``center`` for ``process`` on ``t``."""
    s = grid.spacing
    rmax = _max_radius(grid, center, kind)
    rmin = 2 * s
    if rmax <= rmin:
        raise PreconditionError("grid too small around the centre for radial refinement")
    radii = np.unique(np.concatenate([np.arange(rmin, rmax, 0.5 * s), [rmax],
                                      [1.0] if rmin <= 1.0 <= rmax else []]))
    n = _node_count(rmax, kind, s)
    lat_avg = np.empty(len(radii))
    for chunk in np.array_split(np.arange(len(radii)), max(1, len(radii) // 32)):
        lat_avg[chunk] = _lattice_averages(grid, lattice, center, radii[chunk], kind, n)
    # lattice averages as a function of t; clamp outside the resolved range
    t_r = -np.log(radii[::-1])
    lat_t = np.interp(t, t_r, lat_avg[::-1])
    profile = process - lat_t
    radial = RadialPart(complex(center), kind, t, profile, process, n)
    values = lattice + np.where(grid.mask, radial.profile_at(grid.points), 0.0)
    return values, radial


def _radial_range(grid: Grid, center: complex, kind: str) -> tuple[float, float]:
    rmax = _max_radius(grid, center, kind)
    return -math.log(rmax), -math.log(0.5 * grid.spacing)


# ----------------------------------------------------------------- samplers

def sample_zero_boundary(grid: Grid, rng, method: str = "auto") -> GridField:
    """Dirichlet lattice GFF: zero on the mask boundary, precision ``L/(2 pi)`` inside."""
    rect = bool(grid.mask.all())
    if method == "auto":
        method = "spectral" if rect else "cholesky"
    interior = grid.mask & ~grid.boundary_mask()
    if not interior.any():
        raise PreconditionError("grid interior is empty")
    out = np.zeros(grid.shape)
    if method == "spectral":
        if not rect:
            raise UnsupportedCombinationError("spectral sampling needs a rectangular mask")
        my, mx = grid.ny - 2, grid.nx - 2
        lam = (4 - 2 * np.cos(np.pi * np.arange(1, my + 1) / (my + 1))[:, None]
               - 2 * np.cos(np.pi * np.arange(1, mx + 1) / (mx + 1))[None, :])
        z = rng.standard_normal((my, mx))
        y = sfft.dstn(z, type=1, norm="ortho") / np.sqrt(lam)
        out[1:-1, 1:-1] = math.sqrt(2 * math.pi) * sfft.dstn(y, type=1, norm="ortho")
    elif method == "cholesky":
        idx = np.flatnonzero(interior.ravel())
        if len(idx) > DENSE_LIMIT:
            raise PreconditionError(
                f"{len(idx)} interior cells exceed the dense limit {DENSE_LIMIT}; "
                "use the spectral path on a rectangle")
        L = dirichlet_laplacian(grid, interior).toarray() / (2 * math.pi)
        R = sla.cholesky(L, lower=False)
        x = sla.solve_triangular(R, rng.standard_normal(len(idx)), lower=False)
        out.ravel()[idx] = x
    else:
        raise PreconditionError(f"unknown method {method!r}")
    return GridField(grid, out, bc="zero_boundary", provenance="gff")


def dirichlet_laplacian(grid: Grid, interior: np.ndarray) -> sp.csr_matrix:
    """Graph Laplacian on ``interior`` cells with zero values outside (4-neighbour)."""
    idx = np.flatnonzero(interior.ravel())
    pos = -np.ones(grid.size, dtype=np.int64)
    pos[idx] = np.arange(len(idx))
    j, i = np.divmod(idx, grid.nx)
    rows, cols, vals = [np.arange(len(idx))], [np.arange(len(idx))], [np.full(len(idx), 4.0)]
    for dj, di in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        jj, ii = j + dj, i + di
        ok = (jj >= 0) & (jj < grid.ny) & (ii >= 0) & (ii < grid.nx)
        nb = np.where(ok, pos[np.clip(jj, 0, grid.ny - 1) * grid.nx + np.clip(ii, 0, grid.nx - 1)], -1)
        keep = nb >= 0
        rows.append(np.arange(len(idx))[keep])
        cols.append(nb[keep])
        vals.append(np.full(keep.sum(), -1.0))
    n = len(idx)
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n, n))


def dirichlet_green(grid: Grid, interior: np.ndarray, cells) -> np.ndarray:
    """Columns ``2 pi L^{-1} e_c`` of the Dirichlet lattice Green's function, on the full grid."""
    idx = np.flatnonzero(interior.ravel())
    pos = -np.ones(grid.size, dtype=np.int64)
    pos[idx] = np.arange(len(idx))
    L = dirichlet_laplacian(grid, interior).tocsc()
    cells = np.atleast_1d(np.asarray(cells, dtype=np.int64))
    rhs = np.zeros((len(idx), len(cells)))
    rhs[pos[cells], np.arange(len(cells))] = 2 * math.pi
    sol = spla.splu(L).solve(rhs)
    out = np.zeros((grid.size, len(cells)))
    out[idx] = sol
    return out


def sample_free_boundary_half_plane(grid: Grid, rng, method: str = "auto", refine: bool = True,
                                    radial_dt: float = RADIAL_DT) -> GridField:
    """Free-boundary GFF on a half-plane box, normalized so that h_1(0) = 0.

    The lattice field is the even reflection of a whole-plane lattice field
    across the real axis, giving covariance ``K(x - y) + K(x - conj y)``.
    ``method`` is ``"cholesky"`` (dense factor of that covariance) or
    ``"fft"``; both sample the same law. With ``refine`` the semicircle
    average process at 0 is replaced by an exact ``sqrt(2)`` two-sided
    Brownian motion on a ladder of step ``radial_dt``.
    """
    if method == "auto":
        method = "cholesky" if grid.mask.sum() <= 2500 else "fft"
    if method == "cholesky":
        lattice = _free_lattice_cholesky(grid, rng)
    elif method == "fft":
        lattice = _free_lattice_fft(grid, rng)
    else:
        raise PreconditionError(f"unknown method {method!r}")
    if refine:
        t_lo, t_hi = _radial_range(grid, 0j, "semicircle")
        t, i0 = _fine_t_grid(t_lo, t_hi, radial_dt)
        proc = _two_sided_bm(t, i0, 2.0, rng)
        values, radial = _refine(grid, lattice, 0j, "semicircle", proc, t)
        return GridField(grid, values, bc="free_boundary",
                         normalization="semicircle_avg_at_origin_zero", radial=radial)
    if _max_radius(grid, 0j, "semicircle") < 1.0:
        raise PreconditionError("unit semicircle at 0 does not fit in the grid")
    c = _lattice_averages(grid, lattice, 0j, np.array([1.0]), "semicircle")[0]
    return GridField(grid, lattice - c, bc="free_boundary",
                     normalization="semicircle_avg_at_origin_zero")


def sample_whole_plane(grid: Grid, rng, refine: bool = True,
                       radial_dt: float = RADIAL_DT) -> GridField:
    """Whole-plane GFF modulo constants, pinned so that the circle average h_1(0) = 0."""
    lattice = _whole_plane_lattice(grid, rng)
    if refine:
        t_lo, t_hi = _radial_range(grid, 0j, "circle")
        t, i0 = _fine_t_grid(t_lo, t_hi, radial_dt)
        proc = _two_sided_bm(t, i0, 1.0, rng)
        values, radial = _refine(grid, lattice, 0j, "circle", proc, t)
        return GridField(grid, values, bc="whole_plane_mod_const",
                         normalization="circle_avg_at_origin_zero", radial=radial)
    if _max_radius(grid, 0j, "circle") < 1.0:
        raise PreconditionError("unit circle at 0 does not fit in the grid")
    c = _lattice_averages(grid, lattice, 0j, np.array([1.0]), "circle")[0]
    return GridField(grid, lattice - c, bc="whole_plane_mod_const",
                     normalization="circle_avg_at_origin_zero")


# ------------------------------------------------------ wedges, cones, beads

def last_zero_process(drift: float, rate: float, dt: float, horizon: float, rng,
                      chunk: int = 1 << 16):
    """Brownian motion with positive drift conditioned to stay positive.

    Runs ``X_s = B_{rate s} + drift s`` from 0, locates its last zero ``tau``
    and returns ``s -> X_{tau + s}`` on ``s = 0, dt, ..., horizon`` (value 0
    at ``s = 0``, positive afterwards). The run is extended until the path
    sits high enough that a return to 0 has probability below 1e-12.
    """
    if drift <= 0:
        raise ParameterDomainError("last-zero construction needs a positive drift")
    level = 12 * math.log(10) * rate / (2 * drift)
    sd = math.sqrt(rate * dt)
    path = [np.zeros(1)]
    x = 0.0
    n = 1
    last_zero = 0.0
    while True:
        inc = rng.standard_normal(chunk) * sd + drift * dt
        seg = x + np.cumsum(inc)
        prev = np.concatenate([[x], seg[:-1]])
        cross = np.nonzero((prev > 0) != (seg > 0))[0]
        if cross.size:
            k = cross[-1]
            # crossing time by linear interpolation between the two samples
            frac = prev[k] / (prev[k] - seg[k])
            last_zero = (n - 1 + k + frac) * dt
        path.append(seg)
        n += chunk
        x = seg[-1]
        if x > level and (n - 1) * dt - last_zero > horizon and seg.min() > 0:
            break
    full = np.concatenate(path)
    times = dt * np.arange(len(full))
    s = dt * np.arange(int(math.floor(horizon / dt + 1e-9)) + 1)
    out = np.interp(last_zero + s, times, full)
    out[0] = 0.0
    out[1:] = np.maximum(out[1:], np.finfo(float).tiny)
    return s, out


def wedge_process(params: LqgParams, alpha: float, t: np.ndarray, i0: int, rate: float, rng,
                  dt: float) -> np.ndarray:
    """Circle-average embedding ``A`` on ``t`` (``t[i0] = 0``), ``t = log(1/r)``.

    For ``t >= 0``: ``B_{rate t} - (Q - alpha) t``. For ``t <= 0``: the
    last-zero process of ``B_{rate s} + (Q - alpha) s`` at ``s = -t``.
    """
    drift = params.Q - alpha
    out = np.empty(len(t))
    pos = t[i0:]
    inc = rng.standard_normal(len(pos) - 1) * np.sqrt(rate * np.diff(pos)) - drift * np.diff(pos)
    out[i0] = 0.0
    out[i0 + 1:] = np.cumsum(inc)
    if i0 > 0:
        s, r = last_zero_process(drift, rate, dt, float(-t[0]) + dt, rng)
        out[:i0] = np.interp(-t[:i0], s, r)
    return out


def _strip_zero_column(grid: Grid) -> int:
    i0 = -grid.origin.real / grid.spacing
    if abs(i0 - round(i0)) > 1e-6 or not 0 <= round(i0) < grid.nx:
        raise PreconditionError("strip grid must contain the column t = 0")
    return int(round(i0))


def _strip_lateral(grid: Grid, rng, pad: float = 2.0) -> np.ndarray:
    """Strip field with free boundary on both edges, minus its column means."""
    if abs(grid.origin.imag) > 1e-12 or abs(grid.spacing * (grid.ny - 1) - math.pi) > 1e-9:
        raise PreconditionError("strip grid must span y in [0, pi]")
    period = 2 * (grid.ny - 1)
    n1 = _fast_len(math.ceil(pad * grid.nx))
    g = torus_field(period, n1, rng)[:, : grid.nx]
    rows = np.arange(grid.ny)
    h = (g[rows] + g[(-rows) % period]) / math.sqrt(2.0)
    w = np.full(grid.ny, 1.0)
    w[0] = w[-1] = 0.5
    w /= w.sum()
    return h - (w @ h)[None, :]


def sample_wedge(params: LqgParams, alpha: float, strip_grid: Grid, rng,
                 process_dt: float | None = None) -> GridField:
    """Thick quantum wedge on the strip ``R x [0, pi]`` in its circle-average embedding.

    Column ``t`` of the strip corresponds to the semicircle of radius
    ``e^{-t}`` around the marked point 0 under ``z = -exp(-w)``.
    """
    if not alpha < params.Q:
        raise ParameterDomainError("thick wedge needs alpha < Q; use sample_bead for thin wedges")
    i0 = _strip_zero_column(strip_grid)
    s = strip_grid.spacing
    sub = 16
    dt = process_dt or s / sub
    k = int(round(s / dt))
    t_fine = dt * np.arange(-i0 * k, (strip_grid.nx - 1 - i0) * k + 1)
    A = wedge_process(params, alpha, t_fine, i0 * k, 2.0, rng, dt)
    cols = A[::k]
    lateral = _strip_lateral(strip_grid, rng)
    values = lateral + cols[None, :]
    radial = RadialPart(0j, "vertical", strip_grid.xs, cols, cols)
    return GridField(strip_grid, values, bc="free_boundary", provenance=f"wedge({alpha:g})",
                     gamma=params.gamma, radial=radial)


def sample_cone(params: LqgParams, alpha: float, grid: Grid, rng,
                radial_dt: float = RADIAL_DT) -> GridField:
    """Quantum cone on a planar grid in its circle-average embedding around 0.

    ``A_t = h_{e^{-t}}(0) - Q t`` is the cone process (variance 1 per unit
    ``t``); the planar circle averages are therefore ``A_t + Q t``.
    """
    if not alpha < params.Q:
        raise ParameterDomainError("cone needs alpha < Q")
    lattice = _whole_plane_lattice(grid, rng)
    t_lo, t_hi = _radial_range(grid, 0j, "circle")
    t, i0 = _fine_t_grid(t_lo, t_hi, radial_dt)
    A = wedge_process(params, alpha, t, i0, 1.0, rng, radial_dt)
    values, radial = _refine(grid, lattice, 0j, "circle", A + params.Q * t, t)
    return GridField(grid, values, bc="whole_plane_mod_const", provenance=f"cone({alpha:g})",
                     gamma=params.gamma, radial=radial)


def sample_bessel(dimension: float, dt: float, T: float, start: float, rng) -> np.ndarray:
    """Bessel path on ``0, dt, ..., T`` via Euler steps of its square."""
    if not dimension > 0:
        raise ParameterDomainError("Bessel dimension must be positive")
    if not dt > 0 or start < 0:
        raise PreconditionError("need dt > 0 and start >= 0")
    n = int(math.ceil(T / dt))
    dB = rng.standard_normal(n) * math.sqrt(dt)
    return _squared_bessel_path(dimension, dt, start * start, dB)


def _squared_bessel_path(dimension, dt, y0, dB):
    n = len(dB)
    y = np.empty(n + 1)
    y[0] = y0
    yk = y0
    for k in range(n):
        yk = yk + dimension * dt + 2.0 * math.sqrt(yk) * dB[k]
        if yk < 0.0:
            yk = 0.0
        y[k + 1] = yk
    return np.sqrt(y)


def detect_excursions(path) -> list[tuple[int, int]]:
    """Maximal index intervals ``[a, b]`` with ``path > 0`` strictly inside and zero (or path end) at the ends."""
    pos = np.asarray(path) > 0
    if not pos.any():
        return []
    d = np.diff(pos.astype(np.int8))
    starts = list(np.nonzero(d == 1)[0])
    ends = list(np.nonzero(d == -1)[0] + 1)
    if pos[0]:
        starts = [0] + starts
    if pos[-1]:
        ends = ends + [len(pos) - 1]
    return [(int(a), int(b)) for a, b in zip(starts, ends)]


def bead_bessel_dimension(params: LqgParams, weight: float) -> float:
    """Dimension ``1 + 2W/gamma^2`` of the Bessel process whose excursions are beads."""
    return 1.0 + 2.0 * weight / params.gamma ** 2


def sample_bead(params: LqgParams, weight: float, strip_grid: Grid, rng,
                min_duration: float = 0.5, dt: float = 1e-4, chunk_time: float = 20.0,
                max_attempts: int = 50) -> GridField:
    """One bead of a thin wedge of the given weight, on the strip.

    The first Bessel excursion lasting at least ``min_duration`` is taken,
    reparametrized so that ``(2/gamma) log e`` has quadratic variation
    ``2 du``, and shifted so that its maximum sits at the column ``t = 0``.
    """
    if not 0 < weight < params.gamma ** 2 / 2:
        raise ParameterDomainError("bead needs weight in (0, gamma^2/2)")
    i0 = _strip_zero_column(strip_grid)
    delta = bead_bessel_dimension(params, weight)
    drift = weight / params.gamma - params.gamma / 2
    for attempt in range(1, max_attempts + 1):
        path = sample_bessel(delta, dt, chunk_time, 0.0, rng)
        for a, b in detect_excursions(path):
            if a == 0 or b == len(path) - 1 or (b - a) * dt < min_duration:
                continue
            x = path[a + 1:b]
            du = 2.0 * dt / (params.gamma ** 2 * x ** 2)
            u = np.concatenate([[0.0], np.cumsum(du[1:])])
            y = (2.0 / params.gamma) * np.log(x)
            m = int(np.argmax(y))
            u = u - u[m]
            tcols = strip_grid.xs
            vals = np.interp(tcols, u, y)
            left = tcols < u[0]
            right = tcols > u[-1]
            vals[left] = y[0] - abs(drift) * (u[0] - tcols[left])
            vals[right] = y[-1] - abs(drift) * (tcols[right] - u[-1])
            vals[i0] = y[m]
            lateral = _strip_lateral(strip_grid, rng)
            values = lateral + vals[None, :]
            radial = RadialPart(0j, "vertical", tcols, vals, vals)
            return GridField(strip_grid, values, bc="free_boundary",
                             provenance=f"bead({weight:g})", gamma=params.gamma, radial=radial)
    raise RetryExhaustedError("no qualifying Bessel excursion within the attempt budget",
                              attempts=max_attempts)


# ----------------------------------------------------------------- averages

@dataclass(frozen=True, eq=False)
class AverageProcess:
    center: complex
    log_radii: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.log_radii) <= 0):
            raise PreconditionError("log radii must increase")

    def drifted(self, Q: float) -> np.ndarray:
        """``Y_t = h_{e^{-t}}(center) - Q t``."""
        return self.values - Q * self.log_radii


def _check_radius(field: GridField, radius: float):
    if radius < 2 * field.grid.spacing * (1 - 1e-12):
        raise ResolutionError(
            f"radius {radius:g} below resolution 2*spacing = {2 * field.grid.spacing:g}")


def _exact_radial(field: GridField, center: complex, kind: str):
    rp = field.radial
    return rp is not None and rp.kind == kind and abs(rp.center - complex(center)) < 1e-12


def _averages(field: GridField, center: complex, radii, kind: str) -> np.ndarray:
    radii = np.atleast_1d(np.asarray(radii, dtype=float))
    for r in radii:
        _check_radius(field, r)
    if _exact_radial(field, center, kind):
        lat = _lattice_averages(field.grid, field.lattice_part(), complex(center), radii, kind,
                                field.radial.nodes)
        return lat + field.radial.profile_at(complex(center) + radii)
    pts, w = _arc_points(complex(center), radii, kind, field.grid.spacing)
    vals, valid = field.evaluate(pts)
    if not np.all(valid):
        raise PreconditionError("averaging arc leaves the grid")
    return vals @ w


def semicircle_average(field: GridField, x: float, radius) -> float | np.ndarray:
    out = _averages(field, complex(float(np.real(x)), 0.0), radius, "semicircle")
    return float(out[0]) if np.ndim(radius) == 0 else out


def circle_average(field: GridField, z: complex, radius) -> float | np.ndarray:
    out = _averages(field, complex(z), radius, "circle")
    return float(out[0]) if np.ndim(radius) == 0 else out


def radius_ladder(r0: float, r_min: float, per_octave: int = 4) -> np.ndarray:
    """Ladder ``r_k = r0 * 2^{-k/per_octave}`` down to ``r_min``."""
    k = np.arange(int(math.floor(per_octave * math.log2(r0 / r_min) + 1e-9)) + 1)
    return r0 * 2.0 ** (-k / per_octave)


def average_process(field: GridField, center: complex, radii=None,
                    kind: str | None = None) -> AverageProcess:
    center = complex(center)
    if kind is None:
        kind = "semicircle" if abs(center.imag) < 1e-12 and field.bc == "free_boundary" else "circle"
    if radii is None:
        rmax = min(1.0, _max_radius(field.grid, center, kind))
        radii = radius_ladder(rmax, 2 * field.grid.spacing)
    radii = np.sort(np.asarray(radii, dtype=float))[::-1]
    vals = _averages(field, center, radii, kind)
    return AverageProcess(center, -np.log(radii), vals)


def ring_kernel(radius_cells: float, half: bool = False) -> np.ndarray:
    """Bilinear-spread ring of unit mass; ``half`` keeps the upper semicircle."""
    R = int(math.ceil(radius_cells)) + 1
    K = np.zeros((2 * R + 1, 2 * R + 1))
    if half:
        n = max(65, int(math.ceil(4 * math.pi * radius_cells)) + 1)
        theta = np.linspace(0, math.pi, n)
        w = np.ones(n)
        w[0] = w[-1] = 0.5
    else:
        n = max(64, int(math.ceil(8 * math.pi * radius_cells)))
        theta = 2 * math.pi * np.arange(n) / n
        w = np.ones(n)
    w /= w.sum()
    x = R + radius_cells * np.cos(theta)
    y = R + radius_cells * np.sin(theta)
    i0 = np.floor(x).astype(int)
    j0 = np.floor(y).astype(int)
    fx, fy = x - i0, y - j0
    for dj, di, ww in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                       (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        np.add.at(K, (j0 + dj, i0 + di), w * ww)
    return K


def circle_average_field(field: GridField, epsilon: float) -> np.ndarray:
    """``h_eps`` at every cell: average over the part of the eps-circle inside the domain.

    Zero-boundary fields are extended by 0 outside the domain instead.
    """
    _check_radius(field, epsilon)
    K = ring_kernel(epsilon / field.grid.spacing)[::-1, ::-1]
    m = field.grid.mask.astype(float)
    num = fftconvolve(field.values * m, K, mode="same")
    if field.bc == "zero_boundary":
        den = np.full(field.grid.shape, K.sum())
    else:
        den = fftconvolve(m, K, mode="same")
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(field.grid.mask & (den > 1e-9), num / np.maximum(den, 1e-300), 0.0)
    return out


def boundary_average_values(field: GridField, epsilon: float) -> np.ndarray:
    """Semicircle averages ``h_eps(x)`` at the grid's boundary cells."""
    grid = field.grid
    if grid.boundary_cells.size == 0:
        raise PreconditionError("grid has no boundary cells on the real axis")
    return circle_average_field(field, epsilon).ravel()[grid.boundary_cells]


# ------------------------------------------------------------ domain Markov

def domain_markov_decompose(field: GridField, subdomain) -> tuple[GridField, GridField]:
    """Split ``field`` on ``U`` into a zero-boundary part and a discrete-harmonic part.

    ``partial U`` is the set of cells of ``U`` with a 4-neighbour outside ``U``;
    the harmonic part agrees with ``field`` there and is discrete harmonic at
    the remaining cells of ``U``.
    """
    grid = field.grid
    U = np.asarray(subdomain, dtype=bool) & grid.mask
    ug = grid.with_mask(U)
    if not ug.is_mask_connected():
        raise PreconditionError("subdomain must be mask-connected")
    edge = ug.boundary_mask()
    inner = U & ~edge
    harm = np.where(edge, field.values, 0.0)
    if inner.any():
        L = dirichlet_laplacian(grid, inner).tocsc()
        idx = np.flatnonzero(inner.ravel())
        # boundary contributions: sum of neighbouring edge values
        b = np.zeros(grid.shape)
        pv = np.pad(np.where(edge, field.values, 0.0), 1)
        b += pv[1:-1, 2:] + pv[1:-1, :-2] + pv[2:, 1:-1] + pv[:-2, 1:-1]
        sol = spla.splu(L).solve(b.ravel()[idx])
        harm.ravel()[idx] = sol
    zero = np.where(U, field.values - harm, 0.0)
    zero[edge] = 0.0
    return (GridField(ug, zero, bc="zero_boundary", provenance=field.provenance, gamma=field.gamma),
            GridField(ug, harm, bc=field.bc, provenance="deterministic", gamma=field.gamma))


def discrete_laplacian(values: np.ndarray) -> np.ndarray:
    """``4 v - sum of 4 neighbours`` at interior array positions (edges zero)."""
    v = np.asarray(values, dtype=float)
    out = np.zeros_like(v)
    out[1:-1, 1:-1] = (4 * v[1:-1, 1:-1] - v[1:-1, 2:] - v[1:-1, :-2]
                       - v[2:, 1:-1] - v[:-2, 1:-1])
    return out


# ----------------------------------------------------------------------- io

MAGIC = b"LQGF"
VERSION = 1
_HEADER = struct.Struct("<4sIIIdddBBd")
_BC_CODE = {b: i for i, b in enumerate(BCS)}
_NORM_CODE = {n: i for i, n in enumerate(NORMALIZATIONS)}


def write_field(path, field: GridField) -> None:
    """Binary LQGF file; optional trailing chunks carry provenance and the radial part."""
    g = field.grid
    head = _HEADER.pack(MAGIC, VERSION, g.nx, g.ny, g.spacing, g.origin.real, g.origin.imag,
                        _BC_CODE[field.bc], _NORM_CODE[field.normalization], field.gamma)
    parts = [head, np.ascontiguousarray(field.values, dtype="<f8").tobytes(),
             np.packbits(g.mask.ravel()).tobytes()]
    prov = field.provenance.encode()
    parts.append(b"PROV" + struct.pack("<I", len(prov)) + prov)
    if field.radial is not None:
        rp = field.radial
        kind = rp.kind.encode()
        parts.append(b"RADL" + struct.pack("<ddII", rp.center.real, rp.center.imag, rp.nodes, len(kind)) + kind
                     + struct.pack("<Q", len(rp.t)) + np.asarray(rp.t, "<f8").tobytes()
                     + np.asarray(rp.profile, "<f8").tobytes()
                     + np.asarray(rp.process, "<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_field(path) -> GridField:
    path = Path(path)
    if not path.is_file():
        raise PreconditionError(f"field file not found: {path}")
    data = path.read_bytes()
    if len(data) < _HEADER.size or data[:4] != MAGIC:
        raise PreconditionError(f"{path} is not an LQGF file")
    magic, ver, nx, ny, spacing, ox, oy, bc, norm, gamma = _HEADER.unpack_from(data, 0)
    if ver != VERSION:
        raise PreconditionError(f"unsupported LQGF version {ver}")
    off = _HEADER.size
    n = nx * ny
    values = np.frombuffer(data, "<f8", n, off).reshape(ny, nx).copy()
    off += 8 * n
    nb = (n + 7) // 8
    mask = np.unpackbits(np.frombuffer(data, np.uint8, nb, off))[:n].astype(bool).reshape(ny, nx)
    off += nb
    grid = Grid.rectangle(nx, ny, spacing, complex(ox, oy), mask=mask)
    prov, radial = "gff", None
    while off + 4 <= len(data):
        tag = data[off:off + 4]
        off += 4
        if tag == b"PROV":
            (ln,) = struct.unpack_from("<I", data, off)
            off += 4
            prov = data[off:off + ln].decode()
            off += ln
        elif tag == b"RADL":
            cr, ci, nodes, ln = struct.unpack_from("<ddII", data, off)
            off += 24
            kind = data[off:off + ln].decode()
            off += ln
            (m,) = struct.unpack_from("<Q", data, off)
            off += 8
            arrs = []
            for _ in range(3):
                arrs.append(np.frombuffer(data, "<f8", m, off).copy())
                off += 8 * m
            radial = RadialPart(complex(cr, ci), kind, *arrs, nodes)
        else:
            raise PreconditionError(f"unknown LQGF chunk {tag!r}")
    return GridField(grid, values, bc=BCS[bc], normalization=NORMALIZATIONS[norm],
                     provenance=prov, gamma=gamma, radial=radial)
