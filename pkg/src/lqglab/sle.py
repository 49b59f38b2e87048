"""Loewner evolution: driving processes, trace extraction and cutting a grid along a trace.

Chordal drivers with force points evolve the gaps ``X1 = U - V1`` and
``X2 = V2 - U`` as squared-Bessel type processes and reconstruct ``U`` from
them, which keeps ``V1 <= U <= V2`` exact at every step.  Radial drivers do
the same with the angular gap between ``W`` and the force point ``O``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import ConvexHull, QhullError

from . import kernels
from .core import Grid
from .errors import ParameterDomainError, PreconditionError, ResolutionError

_DET_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class DrivingFunction:
    """Sampled driving process on the uniform time grid ``k * dt``.

    Chordal: ``U``, ``V1``, ``V2`` real.  Radial and whole-plane: ``U`` is the
    unit-modulus ``W`` and ``V1`` the force point ``O``; ``V2`` is empty.
    """

    kind: str
    dt: float
    U: np.ndarray = dc_field(repr=False)
    V1: np.ndarray = dc_field(repr=False)
    V2: np.ndarray = dc_field(repr=False)
    kappa: float
    rho1: float = 0.0
    rho2: float = 0.0

    @property
    def n_steps(self) -> int:
        return len(self.U) - 1

    @property
    def T(self) -> float:
        return self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


def _check(kappa, dt, *rhos):
    if not kappa > 0:
        raise ParameterDomainError(f"kappa must be positive, got {kappa}")
    if not dt > 0:
        raise ParameterDomainError(f"dt must be positive, got {dt}")
    for r in rhos:
        if not r > -2:
            raise ParameterDomainError(f"rho must exceed -2, got {r}")


def chordal_paths(kappa, rho1, rho2, dt, dB):
    """Vectorized chordal SLE_kappa(rho1; rho2) driver from increments ``dB``
    of shape ``(m, n)``.  Returns ``U, V1, V2`` of shape ``(m, n + 1)``."""
    dB = np.atleast_2d(np.asarray(dB, dtype=float))
    m, n = dB.shape
    sk = math.sqrt(kappa)
    c1 = (2 * (rho1 + 2) + kappa) * dt
    c2 = (2 * (rho2 + 2) + kappa) * dt
    reg = kappa * dt
    det = 2.0 * (rho1 + rho2 + 2.0)
    U = np.zeros((m, n + 1))
    X1 = np.zeros((m, n + 1))
    X2 = np.zeros((m, n + 1))
    x1 = np.zeros(m)
    x2 = np.zeros(m)
    u = np.zeros(m)
    for k in range(n):
        db = dB[:, k]
        y1 = x1 * x1 + 2 * sk * x1 * db + c1 - 2 * rho2 * dt * x1 * x2 / (x2 * x2 + reg)
        y2 = x2 * x2 - 2 * sk * x2 * db + c2 - 2 * rho1 * dt * x1 * x2 / (x1 * x1 + reg)
        n1 = np.sqrt(np.abs(y1))
        n2 = np.sqrt(np.abs(y2))
        if abs(det) > _DET_TOL:
            r1 = n1 - x1 - sk * db
            r2 = n2 - x2 + sk * db
            a = ((rho2 + 2) * r1 + rho2 * r2) / det
            b = (rho1 * r1 + (rho1 + 2) * r2) / det
            u = u + sk * db + rho1 * a - rho2 * b
        else:
            floor = math.sqrt(reg)
            u = u + sk * db + (rho1 / np.maximum(x1, floor) - rho2 / np.maximum(x2, floor)) * dt
        x1, x2 = n1, n2
        U[:, k + 1] = u
        X1[:, k + 1] = x1
        X2[:, k + 1] = x2
    return U, U - X1, U + X2


def rhos_from_weights(weight_minus: float, weight_plus: float) -> tuple[float, float]:
    """Force-point weights of the interface between wedges of weights ``W-`` and ``W+``."""
    return weight_minus - 2.0, weight_plus - 2.0


def sample_driving(kappa, rho1, rho2, dt, T, rng) -> DrivingFunction:
    """Chordal SLE_kappa(rho1; rho2) driver started from ``V1 = U = V2 = 0``."""
    _check(kappa, dt, rho1, rho2)
    n = max(1, int(round(T / dt)))
    dB = rng.standard_normal((1, n)) * math.sqrt(dt)
    U, V1, V2 = chordal_paths(kappa, rho1, rho2, dt, dB)
    return DrivingFunction("chordal", float(dt), U[0], V1[0], V2[0], float(kappa), float(rho1), float(rho2))


def constant_driving(value: float, dt: float, T: float, kappa: float = 0.0) -> DrivingFunction:
    n = max(1, int(round(T / dt)))
    U = np.full(n + 1, float(value))
    return DrivingFunction("chordal", float(dt), U, U.copy(), U.copy(), float(kappa))


def radial_gap_paths(kappa, rho, dt, dB, gap0):
    """Angle ``theta`` of ``W`` and ``phi`` of ``O`` for radial SLE_kappa(rho).

    The gap ``D`` to the nearest end of ``(0, 2 pi)`` is evolved through ``D^2``
    so collisions reflect exactly.
    """
    dB = np.atleast_2d(np.asarray(dB, dtype=float))
    m, n = dB.shape
    sk = math.sqrt(kappa)
    c = rho / 2 + 1
    gap = np.full(m, float(gap0))
    theta = np.zeros((m, n + 1))
    phi = np.zeros((m, n + 1))
    phi[:, 0] = -gap
    th = np.zeros(m)
    ph = -gap.copy()
    for k in range(n):
        db = dB[:, k]
        s = np.where(gap <= math.pi, 1.0, -1.0)
        d = np.where(s > 0, gap, 2 * math.pi - gap)
        half = 0.5 * d
        with np.errstate(invalid="ignore", divide="ignore"):
            dcot = np.where(d > 1e-12, d / np.tan(half), 2.0)
        y = d * d + 2 * s * sk * d * db + ((rho + 2) * dcot + kappa) * dt
        dn = np.minimum(np.sqrt(np.abs(y)), 2 * math.pi)
        new_gap = np.where(s > 0, dn, 2 * math.pi - dn)
        new_gap = np.clip(new_gap, 0.0, 2 * math.pi)
        dg = new_gap - gap
        a = (dg - sk * db) / c
        th = th + dg - a
        ph = ph - a
        gap = new_gap
        theta[:, k + 1] = th
        phi[:, k + 1] = ph
    return theta, phi


def radial_driving(kappa, rho, dt, T, rng, gap0: float = 0.0) -> DrivingFunction:
    """Radial SLE_kappa(rho) with ``W_0 = 1`` and ``O_0 = exp(-i gap0)``."""
    _check(kappa, dt, rho)
    n = max(1, int(round(T / dt)))
    dB = rng.standard_normal((1, n)) * math.sqrt(dt)
    theta, phi = radial_gap_paths(kappa, rho, dt, dB, gap0)
    W = np.exp(1j * theta[0])
    O = np.exp(1j * phi[0])
    return DrivingFunction("radial", float(dt), W, O, np.empty(0), float(kappa), float(rho))


def whole_plane_driving(kappa, rho, dt, T, rng, burn_in: float = 10.0) -> DrivingFunction:
    """Whole-plane SLE_kappa(rho) driver: a radial driver whose gap has been
    run for ``burn_in`` time units first, approximating the stationary start."""
    _check(kappa, dt, rho)
    nb = max(0, int(round(burn_in / dt)))
    n = max(1, int(round(T / dt)))
    dB = rng.standard_normal((1, nb + n)) * math.sqrt(dt)
    theta, phi = radial_gap_paths(kappa, rho, dt, dB, math.pi)
    # rotate so that W starts at 1; the gap carries over from the burn-in
    start = theta[0, nb]
    W = np.exp(1j * (theta[0, nb:] - start))
    O = np.exp(1j * (phi[0, nb:] - start))
    return DrivingFunction("whole_plane", float(dt), W, O, np.empty(0), float(kappa), float(rho))


def angle_gap(driving: DrivingFunction) -> np.ndarray:
    """``arg(W / O)`` in ``[0, 2 pi)``."""
    return np.mod(np.angle(driving.U / driving.V1), 2 * math.pi)


# ------------------------------------------------------------------ traces

@dataclass(frozen=True, eq=False)
class SleTrace:
    points: np.ndarray = dc_field(repr=False)
    times: np.ndarray = dc_field(repr=False)
    kind: str = "chordal"
    kappa: float = 0.0
    flagged: np.ndarray | None = dc_field(default=None, repr=False)

    def __len__(self):
        return len(self.points)

    def truncated(self, n: int) -> "SleTrace":
        fl = None if self.flagged is None else self.flagged[:n]
        return SleTrace(self.points[:n], self.times[:n], self.kind, self.kappa, fl)


def extract_trace(driving: DrivingFunction, n_points: int) -> SleTrace:
    """Tips ``eta(t_k)`` at ``n_points`` capacity times, evenly spaced in index,
    by composing exact vertical-slit inverse maps backwards from ``U_{t_k}``."""
    if driving.kind != "chordal":
        raise PreconditionError("trace extraction is implemented for chordal drivers")
    n = driving.n_steps
    n_points = int(min(max(2, n_points), n + 1))
    targets = np.unique(np.round(np.linspace(0, n, n_points)).astype(np.int64))
    z = kernels.loewner_tips(np.ascontiguousarray(driving.U, dtype=float), float(driving.dt), targets)
    bad = ~np.isfinite(z)
    z = np.where(z.imag < 0, z.real + 0j, z)
    if bad.any():
        good = np.flatnonzero(~bad)
        z[bad] = (np.interp(np.flatnonzero(bad), good, z[good].real)
                  + 1j * np.interp(np.flatnonzero(bad), good, z[good].imag))
    return SleTrace(z, targets * driving.dt, "chordal", driving.kappa, bad)


def forward_map(driving: DrivingFunction, points, steps: int | None = None) -> np.ndarray:
    """``g_t(z)`` at ``t = steps * dt`` (default the full horizon)."""
    k = driving.n_steps if steps is None else int(steps)
    drive = np.ascontiguousarray(driving.U[:k + 1], dtype=float)
    return kernels.loewner_forward(drive, float(driving.dt), np.asarray(points, dtype=complex).ravel())


def self_intersection_gap(points: np.ndarray, chunk: int = 512) -> float:
    """Minimum distance between non-adjacent segments of a polyline."""
    p = np.asarray(points, dtype=complex)
    a, b = p[:-1], p[1:]
    m = len(a)
    best = np.inf
    for s in range(0, m, chunk):
        i = np.arange(s, min(m, s + chunk))
        for t in range(s, m, chunk):
            j = np.arange(t, min(m, t + chunk))
            I, J = np.meshgrid(i, j, indexing="ij")
            keep = J > I + 1
            if not keep.any():
                continue
            d = _segment_distance(a[I[keep]], b[I[keep]], a[J[keep]], b[J[keep]])
            best = min(best, float(d.min()))
    return best


def _cross(u, v):
    return u.real * v.imag - u.imag * v.real


def _point_segment(p, a, b):
    ab = b - a
    den = np.abs(ab) ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.where(den > 0, ((p - a) * np.conj(ab)).real / den, 0.0)
    t = np.clip(t, 0.0, 1.0)
    return np.abs(p - (a + t * ab))


def _segment_distance(a1, b1, a2, b2):
    o1 = np.sign(_cross(b1 - a1, a2 - a1))
    o2 = np.sign(_cross(b1 - a1, b2 - a1))
    o3 = np.sign(_cross(b2 - a2, a1 - a2))
    o4 = np.sign(_cross(b2 - a2, b1 - a2))
    hit = (o1 * o2 < 0) & (o3 * o4 < 0)
    d = np.minimum.reduce([_point_segment(a1, a2, b2), _point_segment(b1, a2, b2),
                           _point_segment(a2, a1, b1), _point_segment(b2, a1, b1)])
    return np.where(hit, 0.0, d)


def write_trace_csv(trace: SleTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "re", "im"])
        for t, z in zip(trace.times.tolist(), trace.points.tolist()):
            w.writerow([repr(t), repr(z.real), repr(z.imag)])


def read_trace_csv(path, kappa: float = 0.0) -> SleTrace:
    rows = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if [h.strip() for h in header[:3]] != ["t", "re", "im"]:
            raise PreconditionError(f"{path}: expected header t,re,im")
        for row in r:
            rows.append([float(x) for x in row[:3]])
    a = np.array(rows, dtype=float).reshape(-1, 3)
    return SleTrace(a[:, 1] + 1j * a[:, 2], a[:, 0], "chordal", kappa)


# ------------------------------------------------------------- grid cutting

@dataclass(frozen=True, eq=False)
class GridCut:
    """Result of cutting a grid along a polyline.

    ``labels``: component id per cell (-1 outside the mask); ``side``: +1 for
    components left of the trace, -1 right, 0 not adjacent to it.
    Interface arrays are aligned, one entry per severed edge: ``left``/``right``
    cells, ``position`` (fractional trace-point index of the crossing),
    ``point`` (crossing location) and ``frac`` (distance fraction from the
    left cell to the crossing along the edge).
    """

    grid: Grid
    labels: np.ndarray = dc_field(repr=False)
    side: np.ndarray = dc_field(repr=False)
    left: np.ndarray = dc_field(repr=False)
    right: np.ndarray = dc_field(repr=False)
    position: np.ndarray = dc_field(repr=False)
    point: np.ndarray = dc_field(repr=False)
    frac: np.ndarray = dc_field(repr=False)
    polyline: np.ndarray = dc_field(repr=False)

    @property
    def n_components(self) -> int:
        return len(self.side)

    @property
    def severed(self):
        return np.minimum(self.left, self.right), np.maximum(self.left, self.right)

    def side_mask(self, sign: int) -> np.ndarray:
        comps = np.flatnonzero(self.side == sign)
        return np.isin(self.labels, comps)

    @property
    def interface(self):
        return list(zip(self.left.tolist(), self.right.tolist(), self.position.tolist()))


def clip_to_grid(grid: Grid, points: np.ndarray, margin: float = 0.0):
    """Polyline up to its first exit from the cell-centre rectangle, extended
    half a cell beyond the exit point so boundary edges are cut as well."""
    p = np.asarray(points, dtype=complex)
    x0, x1, y0, y1 = grid.extent
    lo = complex(x0 - margin, y0 - margin)
    hi = complex(x1 + margin, y1 + margin)
    inside = (p.real >= lo.real) & (p.real <= hi.real) & (p.imag >= lo.imag) & (p.imag <= hi.imag)
    out = np.flatnonzero(~inside)
    out = out[out > 0]
    if out.size == 0:
        return p, np.arange(len(p), dtype=float), False
    k = int(out[0])
    a, b = p[k - 1], p[k]
    # parameter where the segment leaves the rectangle
    d = b - a
    ts = [1.0]
    for base, comp, lim_lo, lim_hi in ((a.real, d.real, lo.real, hi.real),
                                       (a.imag, d.imag, lo.imag, hi.imag)):
        if comp > 0:
            ts.append((lim_hi - base) / comp)
        elif comp < 0:
            ts.append((lim_lo - base) / comp)
    t = max(0.0, min(ts))
    exit_pt = a + t * d
    ext = exit_pt + (d / abs(d)) * grid.spacing if abs(d) > 0 else exit_pt
    pts = np.concatenate([p[:k], [exit_pt, ext]])
    pos = np.concatenate([np.arange(k, dtype=float), [k - 1 + t, k - 1 + t]])
    return pts, pos, True


def _densify(points, positions, max_len):
    out_p, out_s = [points[0]], [positions[0]]
    for k in range(len(points) - 1):
        a, b = points[k], points[k + 1]
        m = max(1, int(math.ceil(abs(b - a) / max_len)))
        f = np.arange(1, m + 1) / m
        out_p.extend((a + f * (b - a)).tolist())
        out_s.extend((positions[k] + f * (positions[k + 1] - positions[k])).tolist())
    return np.array(out_p, dtype=complex), np.array(out_s, dtype=float)


def _orient(a, b, c):
    """Sign of the turn ``a -> b -> c`` with zero broken towards +1."""
    return np.where(_cross(b - a, c - a) >= 0, 1, -1)


def cut_grid_along_trace(grid: Grid, trace, max_crossings: int = 2) -> GridCut:
    """Sever grid edges crossed an odd number of times by the trace polyline."""
    pts = trace.points if isinstance(trace, SleTrace) else np.asarray(trace, dtype=complex)
    if len(pts) < 2:
        raise PreconditionError("trace needs at least two points")
    pts, pos, _ = clip_to_grid(grid, pts)
    s = grid.spacing
    if abs(pts[0].imag - grid.origin.imag) <= 1e-9 * s:
        # root on the bottom row: continue it below so the row under it is cut
        pts = np.concatenate([[pts[0] - 1j * s], pts])
        pos = np.concatenate([[pos[0]], pos])
    pts, pos = _densify(pts, pos, 0.5 * s)
    A, B = pts[:-1], pts[1:]
    PA, PB = pos[:-1], pos[1:]
    ox, oy = grid.origin.real, grid.origin.imag
    fx = lambda z: (z.real - ox) / s
    fy = lambda z: (z.imag - oy) / s
    i_lo = np.floor(np.minimum(fx(A), fx(B))).astype(int) - 1
    j_lo = np.floor(np.minimum(fy(A), fy(B))).astype(int) - 1
    # every segment is at most half a cell long, so a 4 x 4 window covers it
    wi, wj = np.meshgrid(np.arange(4), np.arange(4))
    seg = np.repeat(np.arange(len(A)), 16)
    ci = (i_lo[:, None] + wi.ravel()[None, :]).ravel()
    cj = (j_lo[:, None] + wj.ravel()[None, :]).ravel()
    segs, us, vs = [], [], []
    for di, dj in ((1, 0), (0, 1), (1, 1), (-1, 1)):
        ui, uj, vi, vj = ci, cj, ci + di, cj + dj
        ok = ((ui >= 0) & (ui < grid.nx) & (uj >= 0) & (uj < grid.ny)
              & (vi >= 0) & (vi < grid.nx) & (vj >= 0) & (vj < grid.ny))
        segs.append(seg[ok])
        us.append(uj[ok] * grid.nx + ui[ok])
        vs.append(vj[ok] * grid.nx + vi[ok])
    seg = np.concatenate(segs)
    u = np.concatenate(us)
    v = np.concatenate(vs)
    zu = grid.cell_point(u)
    zv = grid.cell_point(v)
    a, b = A[seg], B[seg]
    hit = (_orient(a, b, zu) != _orient(a, b, zv)) & (_orient(zu, zv, a) != _orient(zu, zv, b))
    seg, u, v = seg[hit], u[hit], v[hit]
    key = np.minimum(u, v).astype(np.int64) * grid.size + np.maximum(u, v)
    # one (edge, segment) pair may be generated by a single segment only once
    key_seg = np.unique(np.stack([key, seg]), axis=1)
    key, seg = key_seg
    ukeys, counts = np.unique(key, return_counts=True)
    if counts.size and counts.max() > max_crossings:
        raise ResolutionError(
            f"a grid edge is crossed {counts.max()} times; use more trace points or a finer grid")
    odd = ukeys[counts % 2 == 1]
    # keep the first crossing along the trace for each severed edge
    sel = np.isin(key, odd)
    key, seg = key[sel], seg[sel]
    order = np.lexsort((seg, key))
    key, seg = key[order], seg[order]
    first = np.concatenate([[True], key[1:] != key[:-1]]) if key.size else np.zeros(0, bool)
    key, seg = key[first], seg[first]
    eu, ev = key // grid.size, key % grid.size
    zu, zv = grid.cell_point(eu), grid.cell_point(ev)
    a, b = A[seg], B[seg]
    # crossing point and its parameters along the edge and along the trace
    den = _cross(b - a, zv - zu)
    with np.errstate(invalid="ignore", divide="ignore"):
        te = np.where(den != 0, _cross(b - a, a - zu) / den, 0.5)
        ts = np.where(den != 0, _cross(zv - zu, a - zu) / den, 0.5)
    te = np.clip(te, 0.0, 1.0)
    ts = np.clip(ts, 0.0, 1.0)
    cross_pt = zu + te * (zv - zu)
    position = PA[seg] + ts * (PB[seg] - PA[seg])
    u_left = _cross(b - a, zu - a) >= 0
    left = np.where(u_left, eu, ev)
    right = np.where(u_left, ev, eu)
    frac = np.where(u_left, te, 1 - te)
    order = np.argsort(position, kind="stable")
    left, right, position, cross_pt, frac = (x[order] for x in (left, right, position, cross_pt, frac))
    # components of the grid graph with severed edges removed
    from .lfpp import grid_edges

    gu, gv, _ = grid_edges(grid, grid.mask)
    keep = ~np.isin(gu.astype(np.int64) * grid.size + gv, odd)
    gu, gv = gu[keep], gv[keep]
    adj = coo_matrix((np.ones(len(gu)), (gu, gv)), shape=(grid.size, grid.size))
    _, lab = connected_components(adj, directed=False)
    flat_mask = grid.mask.ravel()
    # renumber components over masked cells in order of first appearance
    comp_ids = lab[flat_mask]
    uniq, first_idx = np.unique(comp_ids, return_index=True)
    uniq = uniq[np.argsort(first_idx)]
    remap = -np.ones(lab.max() + 1, dtype=int)
    remap[uniq] = np.arange(len(uniq))
    labels = np.full(grid.size, -1, dtype=int)
    labels[flat_mask] = remap[comp_ids]
    side = np.zeros(len(uniq), dtype=int)
    if left.size:
        lc = labels[left]
        rc = labels[right]
        for c in range(len(uniq)):
            nl = np.count_nonzero(lc == c)
            nr = np.count_nonzero(rc == c)
            side[c] = 1 if nl > nr else (-1 if nr > nl else 0)
    return GridCut(grid, labels.reshape(grid.shape), side, left.astype(np.int64), right.astype(np.int64),
                   position, cross_pt, frac, pts)


# -------------------------------------------------------------- bottlenecks

@dataclass(frozen=True, eq=False)
class BottleneckSample:
    endpoint_distance: np.ndarray
    diameter: np.ndarray
    partial: bool


def _diameter(points: np.ndarray) -> float:
    xy = np.column_stack([points.real, points.imag])
    if len(xy) > 8:
        try:
            xy = xy[ConvexHull(xy).vertices]
        except QhullError:
            pass
    d = xy[:, None, :] - xy[None, :, :]
    return float(np.sqrt((d ** 2).sum(-1)).max())


def bottleneck_statistics(trace: SleTrace, box, pair_count: int, rng,
                          max_tries: int | None = None) -> BottleneckSample:
    """Random ``s < t`` with ``eta(s), eta(t)`` in ``box = (x0, x1, y0, y1)``:
    endpoint distance and diameter of ``eta([s, t])``."""
    x0, x1, y0, y1 = box
    p = trace.points
    inside = np.flatnonzero((p.real >= x0) & (p.real <= x1) & (p.imag >= y0) & (p.imag <= y1))
    e, dm = [], []
    tries = 0
    max_tries = max_tries or 20 * pair_count
    while len(e) < pair_count and tries < max_tries and inside.size >= 2:
        tries += 1
        s, t = np.sort(rng.choice(inside, size=2, replace=False))
        dist = abs(p[t] - p[s])
        if dist <= 0:
            continue
        e.append(dist)
        dm.append(max(dist, _diameter(p[s:t + 1])))
    return BottleneckSample(np.array(e), np.array(dm), len(e) < pair_count)
