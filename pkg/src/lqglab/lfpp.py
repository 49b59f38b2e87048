"""Liouville first passage percolation on the 8-neighbour grid graph.

Edge ``(u, v)`` has weight ``|u - v| exp(xi (m(u) + m(v)) / 2)`` where ``m``
is the field mollified by a Gaussian of standard deviation ``eps/sqrt(2)``.
Shortest paths use the compiled Dijkstra kernel with ``(distance, cell)``
heap ordering, so ties resolve identically on every run and backend.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from . import kernels
from .core import Grid, LqgParams
from .errors import PreconditionError, ResolutionError
from .fields import GridField

# (di, dj) offsets; only the four "forward" ones are enumerated when building edges
_FORWARD = ((1, 0), (0, 1), (1, 1), (-1, 1))


def mollify(field: GridField, epsilon: float) -> GridField:
    """Gaussian smoothing at scale ``eps`` (std ``eps/sqrt 2``), truncated at 4 std,
    renormalized over in-domain cells."""
    s = field.grid.spacing
    if epsilon < s * (1 - 1e-12):
        raise ResolutionError(f"epsilon {epsilon:g} below the spacing {s:g}")
    sigma = epsilon / math.sqrt(2.0) / s
    m = field.grid.mask.astype(float)
    num = gaussian_filter(field.values * m, sigma, mode="constant", truncate=4.0)
    den = gaussian_filter(m, sigma, mode="constant", truncate=4.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(field.grid.mask, num / np.where(den > 0, den, 1.0), 0.0)
    return GridField(field.grid, out, bc=field.bc, normalization="none",
                     provenance=field.provenance, gamma=field.gamma)


def grid_edges(grid: Grid, active: np.ndarray):
    """Undirected 8-neighbour edges ``(u, v, length)`` between active cells, ``u < v``."""
    us, vs, ls = [], [], []
    for di, dj in _FORWARD:
        j0, j1 = 0, grid.ny - dj
        i0, i1 = max(0, -di), grid.nx - max(0, di)
        a = active[j0:j1, i0:i1] & active[j0 + dj:j1 + dj, i0 + di:i1 + di]
        jj, ii = np.nonzero(a)
        jj = jj + j0
        ii = ii + i0
        u = jj * grid.nx + ii
        v = (jj + dj) * grid.nx + ii + di
        us.append(np.minimum(u, v))
        vs.append(np.maximum(u, v))
        ls.append(np.full(len(u), grid.spacing * math.hypot(di, dj)))
    return np.concatenate(us), np.concatenate(vs), np.concatenate(ls)


def build_csr(n: int, u: np.ndarray, v: np.ndarray, w: np.ndarray):
    """Symmetric CSR adjacency with neighbours sorted by index."""
    src = np.concatenate([u, v]).astype(np.int64)
    dst = np.concatenate([v, u]).astype(np.int64)
    wt = np.concatenate([w, w]).astype(float)
    order = np.lexsort((dst, src))
    src, dst, wt = src[order], dst[order], wt[order]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=n), out=indptr[1:])
    return indptr, np.ascontiguousarray(dst), np.ascontiguousarray(wt)


def edge_key(u, v, n: int) -> np.ndarray:
    u = np.asarray(u, np.int64)
    v = np.asarray(v, np.int64)
    return np.minimum(u, v) * n + np.maximum(u, v)


@dataclass(frozen=True, eq=False)
class DistanceOracle:
    """Shortest-path oracle for the LFPP metric on a grid.

    ``log_weight`` is ``xi * m`` per cell; ``severed`` holds edge keys
    ``min(u,v) * N + max(u,v)`` removed from the graph.
    """

    grid: Grid
    xi: float
    epsilon: float
    log_weight: np.ndarray = dc_field(repr=False)
    severed: np.ndarray = dc_field(default_factory=lambda: np.empty(0, np.int64), repr=False)
    _cache: dict = dc_field(default_factory=dict, repr=False, compare=False)

    # graph
    def edges(self, subdomain=None):
        active = self.grid.mask if subdomain is None else (self.grid.mask & np.asarray(subdomain, bool))
        u, v, length = grid_edges(self.grid, active)
        if self.severed.size:
            keep = ~np.isin(u * self.grid.size + v, self.severed)
            u, v, length = u[keep], v[keep], length[keep]
        lw = self.log_weight.ravel()
        w = length * np.exp(0.5 * (lw[u] + lw[v]))
        return u, v, w

    @property
    def edge_weight(self) -> np.ndarray:
        return self.edges()[2]

    def _csr(self, subdomain=None):
        key = None if subdomain is None else np.asarray(subdomain, bool).tobytes()
        if key not in self._cache:
            if len(self._cache) > 8:
                self._cache.clear()
            u, v, w = self.edges(subdomain)
            self._cache[key] = build_csr(self.grid.size, u, v, w)
        return self._cache[key]

    # queries
    def _cells(self, pts) -> np.ndarray:
        arr = np.atleast_1d(pts)
        if np.issubdtype(arr.dtype, np.integer):
            return arr.astype(np.int64)
        return self.grid.nearest_cell(arr.astype(complex))

    def distances_from(self, sources, subdomain=None, limit: float = np.inf,
                       source_dist=None, with_pred: bool = False):
        """Single- or multi-source distances to every cell, shape ``(ny, nx)``.

        With a finite ``limit`` only entries below it are final; the rest are +inf.
        """
        cells = self._cells(sources)
        sd = np.zeros(len(cells)) if source_dist is None else np.asarray(source_dist, float)
        indptr, idx, w = self._csr(subdomain)
        dist, pred = kernels.csr_dijkstra(indptr, idx, w, cells, sd, float(limit), -1)
        if np.isfinite(limit):
            dist = np.where(dist <= limit, dist, np.inf)
        dist = dist.reshape(self.grid.shape)
        return (dist, pred) if with_pred else dist

    def query(self, z, w, subdomain=None) -> tuple[float, bool]:
        """Distance and reachability flag."""
        a, b = self._cells(z)[0], self._cells(w)[0]
        indptr, idx, wt = self._csr(subdomain)
        dist, _ = kernels.csr_dijkstra(indptr, idx, wt, np.array([a]), np.zeros(1), np.inf, int(b))
        d = float(dist[b])
        return d, bool(np.isfinite(d))

    def distance(self, z, w, subdomain=None) -> float:
        return self.query(z, w, subdomain)[0]

    def pair_distances(self, pairs, subdomain=None) -> np.ndarray:
        """Distances for ``(z, w)`` pairs, one Dijkstra per distinct source."""
        pairs = list(pairs)
        src = self._cells([p[0] for p in pairs])
        dst = self._cells([p[1] for p in pairs])
        out = np.empty(len(pairs))
        for s in np.unique(src):
            d = self.distances_from(np.array([s]), subdomain).ravel()
            sel = src == s
            out[sel] = d[dst[sel]]
        return out

    def path(self, z, w, subdomain=None) -> np.ndarray:
        """Cells of the tie-broken shortest path from ``z`` to ``w``."""
        a, b = self._cells(z)[0], self._cells(w)[0]
        indptr, idx, wt = self._csr(subdomain)
        dist, pred = kernels.csr_dijkstra(indptr, idx, wt, np.array([a]), np.zeros(1), np.inf, int(b))
        if not np.isfinite(dist[b]):
            return np.empty(0, np.int64)
        out = [int(b)]
        while out[-1] != a:
            out.append(int(pred[out[-1]]))
        return np.array(out[::-1], dtype=np.int64)


def build_oracle(field: GridField, params: LqgParams, epsilon: float,
                 xi: float | None = None, normalize: bool = False) -> DistanceOracle:
    """LFPP oracle of ``field`` at mollification scale ``epsilon``.

    ``xi`` defaults to ``params.xi`` and then needs an estimated ``d_gamma``.
    With ``normalize`` distances are divided by ``eps^(1 - xi Q)``, the LFPP
    scaling constant up to a factor, so values at different ``eps`` compare.
    """
    if xi is None:
        xi = params.require_dgamma().xi
    m = mollify(field, epsilon)
    lw = xi * m.values
    if normalize:
        lw = lw + (xi * params.Q - 1.0) * math.log(epsilon)
    return DistanceOracle(field.grid, float(xi), float(epsilon), lw)


def weyl_scale(oracle: DistanceOracle, f) -> DistanceOracle:
    """Oracle of the field plus ``f``: edge weights times ``exp(xi (f(u) + f(v))/2)``."""
    f = np.broadcast_to(np.asarray(f, dtype=float), oracle.grid.shape)
    if not np.all(np.isfinite(f[oracle.grid.mask])):
        raise PreconditionError("Weyl factor must be finite on the domain")
    return replace(oracle, log_weight=oracle.log_weight + oracle.xi * f, _cache={})


def with_severed(oracle: DistanceOracle, u, v) -> DistanceOracle:
    keys = edge_key(u, v, oracle.grid.size)
    return replace(oracle, severed=np.union1d(oracle.severed, keys), _cache={})


def internal_distance(oracle: DistanceOracle, subdomain, z, w) -> float:
    """Shortest path constrained to cells of ``subdomain``."""
    sub = np.asarray(subdomain, bool) & oracle.grid.mask
    a, b = oracle._cells(z)[0], oracle._cells(w)[0]
    if not (sub.ravel()[a] and sub.ravel()[b]):
        raise PreconditionError("query points must lie in the subdomain")
    return oracle.distance(a, b, subdomain=sub)


def metric_ball(oracle: DistanceOracle, center, radius: float) -> np.ndarray:
    """Cells at distance ``< radius`` from ``center``; the centre is always included."""
    d = oracle.distances_from(center, limit=radius)
    out = d < radius
    out.ravel()[oracle._cells(center)[0]] = True
    return out


def boundary_cells_in(grid: Grid, a: float, b: float) -> np.ndarray:
    bc = grid.boundary_cells
    x = grid.cell_point(bc).real
    lo, hi = min(a, b), max(a, b)
    tol = 1e-9 * grid.spacing
    return bc[(x >= lo - tol) & (x <= hi + tol)]


def boundary_neighborhood(oracle: DistanceOracle, interval, delta: float) -> np.ndarray:
    """Cells at distance ``< delta`` from the boundary segment ``[a, b]``."""
    cells = boundary_cells_in(oracle.grid, *interval)
    if cells.size == 0:
        raise PreconditionError("interval contains no boundary cells")
    d = oracle.distances_from(cells, limit=delta)
    out = d < delta
    out.ravel()[cells] = True
    return out


def boundary_distance(oracle: DistanceOracle, a: float, b: float) -> float:
    """Distance between the boundary cells nearest to ``a`` and ``b`` on the real axis."""
    grid = oracle.grid
    ca = grid.nearest_cell(complex(a, 0.0))[()]
    cb = grid.nearest_cell(complex(b, 0.0))[()]
    onb = set(grid.boundary_cells.tolist())
    if int(ca) not in onb or int(cb) not in onb:
        raise PreconditionError("a and b must be boundary cells")
    return oracle.distance(int(ca), int(cb))


def octile_distance(grid: Grid, a: int, b: int) -> float:
    ja, ia = divmod(int(a), grid.nx)
    jb, ib = divmod(int(b), grid.nx)
    dx, dy = abs(ia - ib), abs(ja - jb)
    return grid.spacing * (max(dx, dy) + (math.sqrt(2) - 1) * min(dx, dy))
