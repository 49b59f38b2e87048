"""Parameters, grid geometry, conformal coordinate changes and seeded RNG streams."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ParameterDomainError, PlaceholderError, PreconditionError


# ---------------------------------------------------------------- parameters

@dataclass(frozen=True)
class LqgParams:
    """LQG parameter ``gamma`` and every constant derived from it.

    ``d_gamma`` has no closed form. Without an override it is a NaN
    placeholder and ``xi`` is NaN too; :meth:`require_dgamma` guards every
    consumer that needs a distance exponent.
    """

    gamma: float
    Q: float
    xi: float
    d_gamma: float
    s_plus: float
    seed: int = 0

    @property
    def has_dgamma(self) -> bool:
        return not math.isnan(self.d_gamma)

    def require_dgamma(self) -> "LqgParams":
        if not self.has_dgamma:
            raise PlaceholderError(
                "d_gamma is a placeholder; run estimate_dgamma or pass an override first")
        return self

    def with_dgamma(self, d_gamma: float) -> "LqgParams":
        return derive_params(self.gamma, d_gamma, seed=self.seed)

    def with_seed(self, seed: int) -> "LqgParams":
        return replace(self, seed=int(seed))


def s_plus(gamma: float) -> float:
    g2 = gamma * gamma
    num = 4 * g2 + 2 * math.sqrt(2) * gamma * math.sqrt((2 + g2) * (8 + g2))
    return num / (4 + g2) ** 2


def derive_params(gamma: float, d_gamma_override: float | None = None,
                  seed: int = 0) -> LqgParams:
    gamma = float(gamma)
    if not 0 < gamma < 2:
        raise ParameterDomainError(f"gamma must lie in (0, 2), got {gamma}")
    if d_gamma_override is None:
        d = math.nan
    else:
        d = float(d_gamma_override)
        if not d > 2:
            raise ParameterDomainError(f"d_gamma must exceed 2, got {d}")
    Q = 2.0 / gamma + gamma / 2.0
    return LqgParams(gamma=gamma, Q=Q, xi=gamma / d, d_gamma=d,
                     s_plus=s_plus(gamma), seed=int(seed))


def wedge_weight(params: LqgParams, alpha: float) -> float:
    """Weight W = gamma (gamma/2 + Q - alpha) of an alpha-quantum wedge."""
    if not alpha < params.Q + params.gamma / 2:
        raise ParameterDomainError("alpha must be below Q + gamma/2")
    return params.gamma * (params.gamma / 2 + params.Q - alpha)


def alpha_from_weight(params: LqgParams, weight: float) -> float:
    if not weight > 0:
        raise ParameterDomainError("wedge weight must be positive")
    return params.gamma / 2 + params.Q - weight / params.gamma


def bessel_dimension(params: LqgParams, alpha: float) -> float:
    """Dimension 2 + 2(Q - alpha)/gamma of the Bessel process encoding a wedge."""
    return 2.0 + 2.0 * (params.Q - alpha) / params.gamma


def cone_alpha_from_weight(params: LqgParams, weight: float) -> float:
    if not weight > 0:
        raise ParameterDomainError("cone weight must be positive")
    return params.Q - weight / (2 * params.gamma)


# ---------------------------------------------------------------------- rng

def _key_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFF
    return zlib.crc32(str(key).encode())


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Philox stream addressed by ``(seed, *keys)``.

    Streams with different key paths are independent, and a stream's output
    does not depend on which other streams were drawn first.
    """
    ss = np.random.SeedSequence(int(seed) & (2**64 - 1),
                                spawn_key=tuple(_key_int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


# --------------------------------------------------------------------- grid

@dataclass(frozen=True, eq=False)
class Grid:
    """Lattice of cell centres ``origin + spacing*(i + 1j*j)``.

    Arrays indexed by the grid have shape ``(ny, nx)``: row ``j`` is the
    ``j``-th horizontal line. ``boundary_cells`` lists flat indices of cells on
    the real axis, sorted by real part.
    """

    origin: complex
    spacing: float
    nx: int
    ny: int
    mask: np.ndarray = field(repr=False)
    boundary_cells: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.spacing <= 0 or self.nx < 2 or self.ny < 2:
            raise PreconditionError("grid needs positive spacing and at least 2x2 cells")
        mask = np.ascontiguousarray(self.mask, dtype=bool)
        if mask.shape != (self.ny, self.nx):
            raise PreconditionError("mask shape must be (ny, nx)")
        mask.setflags(write=False)
        bc = np.asarray(self.boundary_cells, dtype=np.int64)
        if bc.size:
            order = np.argsort(self.points.ravel()[bc].real, kind="stable")
            bc = bc[order]
        bc.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "boundary_cells", bc)
        object.__setattr__(self, "origin", complex(self.origin))

    # construction
    @classmethod
    def rectangle(cls, nx: int, ny: int, spacing: float, origin: complex = 0j,
                  mask=None) -> "Grid":
        if mask is None:
            mask = np.ones((ny, nx), dtype=bool)
        g = cls(origin, float(spacing), int(nx), int(ny), mask, np.empty(0, np.int64))
        return g._with_axis_boundary()

    @classmethod
    def half_plane(cls, nx: int, ny: int, spacing: float, x_center: float = 0.0) -> "Grid":
        """Box ``[x_center - w/2, x_center + w/2] x [0, h]`` with its bottom row on the real axis."""
        origin = complex(x_center - 0.5 * (nx - 1) * spacing, 0.0)
        return cls.rectangle(nx, ny, spacing, origin)

    @classmethod
    def centered(cls, nx: int, ny: int, spacing: float, center: complex = 0j) -> "Grid":
        origin = complex(center) - complex(0.5 * (nx - 1) * spacing, 0.5 * (ny - 1) * spacing)
        return cls.rectangle(nx, ny, spacing, origin)

    @classmethod
    def strip(cls, nt: int, ny: int, t_min: float) -> "Grid":
        """Strip grid ``[t_min, t_min + (nt-1)s] x [0, pi]`` with ``s = pi/(ny-1)``."""
        s = math.pi / (ny - 1)
        return cls.rectangle(nt, ny, s, complex(t_min, 0.0))

    def with_mask(self, mask) -> "Grid":
        return Grid(self.origin, self.spacing, self.nx, self.ny, mask,
                    np.empty(0, np.int64))._with_axis_boundary()

    def _with_axis_boundary(self) -> "Grid":
        tol = 1e-9 * self.spacing
        rows = np.nonzero(np.abs(self.ys) <= tol)[0]
        if rows.size:
            j = int(rows[0])
            cols = np.nonzero(self.mask[j])[0]
            bc = j * self.nx + cols
        else:
            bc = np.empty(0, np.int64)
        object.__setattr__(self, "boundary_cells", np.asarray(bc, np.int64))
        self.boundary_cells.setflags(write=False)
        return self

    # geometry
    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def size(self) -> int:
        return self.nx * self.ny

    @property
    def xs(self) -> np.ndarray:
        return self.origin.real + self.spacing * np.arange(self.nx)

    @property
    def ys(self) -> np.ndarray:
        return self.origin.imag + self.spacing * np.arange(self.ny)

    @property
    def points(self) -> np.ndarray:
        return self.xs[None, :] + 1j * self.ys[:, None]

    @property
    def extent(self) -> tuple[float, float, float, float]:
        xs, ys = self.xs, self.ys
        return xs[0], xs[-1], ys[0], ys[-1]

    def lattice_coords(self, z):
        """Fractional (column, row) coordinates of points ``z``."""
        z = np.asarray(z, dtype=complex)
        return ((z.real - self.origin.real) / self.spacing,
                (z.imag - self.origin.imag) / self.spacing)

    def nearest_cell(self, z) -> np.ndarray:
        ci, cj = self.lattice_coords(z)
        i = np.clip(np.rint(ci).astype(np.int64), 0, self.nx - 1)
        j = np.clip(np.rint(cj).astype(np.int64), 0, self.ny - 1)
        return j * self.nx + i

    def cell_point(self, flat) -> np.ndarray:
        flat = np.asarray(flat, dtype=np.int64)
        j, i = np.divmod(flat, self.nx)
        return self.origin + self.spacing * (i + 1j * j)

    def contains(self, z) -> np.ndarray:
        """True where bilinear interpolation at ``z`` uses only in-mask cells."""
        return bilinear_stencil(self, z)[2]

    def boundary_mask(self) -> np.ndarray:
        """In-mask cells with a 4-neighbour outside the mask or the array."""
        m = self.mask
        pad = np.pad(m, 1, constant_values=False)
        inner = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
        return m & ~inner

    def is_mask_connected(self) -> bool:
        from scipy.ndimage import label

        _, n = label(self.mask, structure=np.ones((3, 3)))
        return n == 1

    def to_dict(self) -> dict:
        return {"nx": self.nx, "ny": self.ny, "spacing": self.spacing,
                "origin": [self.origin.real, self.origin.imag]}


def bilinear_stencil(grid: Grid, z):
    """Four-cell stencil for bilinear interpolation at points ``z``.

    Returns ``(flat_indices (..., 4), weights (..., 4), valid)``. A point is
    valid when it lies in the hull of the cell centres and every stencil cell
    with positive weight is in the mask.
    """
    ci, cj = grid.lattice_coords(z)
    ci = np.asarray(ci, dtype=float)
    cj = np.asarray(cj, dtype=float)
    eps = 1e-9
    inside = (ci >= -eps) & (ci <= grid.nx - 1 + eps) & (cj >= -eps) & (cj <= grid.ny - 1 + eps)
    ci = np.clip(ci, 0, grid.nx - 1)
    cj = np.clip(cj, 0, grid.ny - 1)
    i0 = np.minimum(np.floor(ci).astype(np.int64), grid.nx - 2)
    j0 = np.minimum(np.floor(cj).astype(np.int64), grid.ny - 2)
    fx = ci - i0
    fy = cj - j0
    idx = np.stack([j0 * grid.nx + i0, j0 * grid.nx + i0 + 1,
                    (j0 + 1) * grid.nx + i0, (j0 + 1) * grid.nx + i0 + 1], axis=-1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    m = grid.mask.ravel()[idx]
    valid = inside & np.all(m | (w <= 1e-12), axis=-1)
    return idx, w, valid


def bilinear(grid: Grid, values: np.ndarray, z):
    """Interpolate cell values at ``z``; returns ``(values, valid)`` with NaN where invalid."""
    idx, w, valid = bilinear_stencil(grid, z)
    v = np.asarray(values, dtype=float).ravel()
    out = np.sum(v[idx] * w, axis=-1)
    out = np.where(valid, out, np.nan)
    return out, valid


# ----------------------------------------------------------- conformal maps

@dataclass(frozen=True)
class ConformalMap:
    """Conformal map from the catalogue, with inverse and derivative.

    kinds:
      * ``mobius``: ``(a z + b)/(c z + d)``
      * ``half_plane_to_strip``: ``z -> -log(-z)`` sending H onto R x (0, pi)
      * ``strip_to_half_plane``: ``w -> -exp(-w)``, the inverse of the above
      * ``scaling``: ``z -> r z + z0``
    """

    kind: str
    params: tuple = ()

    def __post_init__(self):
        if self.kind not in ("mobius", "half_plane_to_strip", "strip_to_half_plane", "scaling"):
            raise PreconditionError(f"unknown map kind {self.kind!r}")

    @classmethod
    def mobius(cls, a, b, c, d) -> "ConformalMap":
        if a * d - b * c == 0:
            raise PreconditionError("degenerate Mobius map")
        return cls("mobius", (complex(a), complex(b), complex(c), complex(d)))

    @classmethod
    def scaling(cls, r: float, z0: complex = 0j) -> "ConformalMap":
        if r <= 0:
            raise PreconditionError("scaling factor must be positive")
        return cls("scaling", (float(r), complex(z0)))

    @classmethod
    def half_plane_to_strip(cls) -> "ConformalMap":
        return cls("half_plane_to_strip")

    @classmethod
    def strip_to_half_plane(cls) -> "ConformalMap":
        return cls("strip_to_half_plane")

    @classmethod
    def identity(cls) -> "ConformalMap":
        return cls.scaling(1.0)

    def __call__(self, z):
        z = np.asarray(z, dtype=complex)
        if self.kind == "mobius":
            a, b, c, d = self.params
            return (a * z + b) / (c * z + d)
        if self.kind == "scaling":
            r, z0 = self.params
            return r * z + z0
        if self.kind == "half_plane_to_strip":
            return -np.log(-z)
        return -np.exp(-z)

    def inverse(self, w):
        w = np.asarray(w, dtype=complex)
        if self.kind == "mobius":
            a, b, c, d = self.params
            return (d * w - b) / (-c * w + a)
        if self.kind == "scaling":
            r, z0 = self.params
            return (w - z0) / r
        if self.kind == "half_plane_to_strip":
            return -np.exp(-w)
        return -np.log(-w)

    def derivative(self, z):
        z = np.asarray(z, dtype=complex)
        if self.kind == "mobius":
            a, b, c, d = self.params
            return (a * d - b * c) / (c * z + d) ** 2
        if self.kind == "scaling":
            return np.full(z.shape, self.params[0], dtype=complex)
        if self.kind == "half_plane_to_strip":
            return -1.0 / z
        return np.exp(-z)

    def inverted(self) -> "ConformalMap":
        if self.kind == "mobius":
            a, b, c, d = self.params
            return ConformalMap.mobius(d, -b, -c, a)
        if self.kind == "scaling":
            r, z0 = self.params
            return ConformalMap.scaling(1.0 / r, -z0 / r)
        if self.kind == "half_plane_to_strip":
            return ConformalMap.strip_to_half_plane()
        return ConformalMap.half_plane_to_strip()


def pushforward_field(field, psi: ConformalMap, target: Grid, params: LqgParams):
    """Change coordinates of ``field`` onto ``target``.

    ``psi`` maps the target domain into the field's domain, and the new field
    is ``h(psi(w)) + Q log|psi'(w)|``. Target cells whose image falls outside
    the field's grid are dropped from the output mask.
    """
    from .fields import GridField

    w = target.points
    z = psi(w)
    vals, valid = field.evaluate(z)
    vals = vals + params.Q * np.log(np.abs(psi.derivative(w)))
    mask = target.mask & valid
    out_grid = target.with_mask(mask)
    vals = np.where(mask, vals, 0.0)
    return GridField(out_grid, vals, bc=field.bc, normalization="none",
                     provenance=field.provenance, gamma=params.gamma)


# ------------------------------------------------------------------- config

def load_config(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise PreconditionError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise PreconditionError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise PreconditionError(f"config file {path} must hold a JSON object")
    return cfg


def params_from_config(cfg: dict) -> LqgParams:
    if "gamma" not in cfg:
        raise PreconditionError("config lacks 'gamma'")
    return derive_params(cfg["gamma"], cfg.get("d_gamma"), seed=int(cfg.get("seed", 0)))
