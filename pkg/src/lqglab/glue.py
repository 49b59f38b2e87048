"""Metric gluing of finite pieces along identified points.

The quotient distance is the infimum over chains ``x0, y0 ~ x1, y1 ~ ...``
of the summed piece distances.  When every piece metric is a graph metric
this equals the shortest-path distance in the union of the piece graphs
with identified nodes merged (``route="union"``).  The explicit gluing graph
(``route="gluing_graph"``) keeps only query and identified nodes and joins
them by piece distances; it is used for small instances and for audits.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from . import kernels
from .core import LqgParams
from .errors import CalibrationError, PreconditionError
from .fields import GridField
from .lfpp import DistanceOracle, build_csr, build_oracle, grid_edges
from .sle import SleTrace, cut_grid_along_trace


@dataclass(frozen=True, eq=False)
class Piece:
    """A finite pseudometric space given by a weighted graph on ``n_nodes`` nodes.

    ``cells`` maps nodes to grid cells (``-1`` for added interface nodes).
    ``arcs`` maps a name to ``(nodes, nu)``: an ordered boundary arc and its
    cumulative length coordinates.
    """

    id: str
    n_nodes: int
    u: np.ndarray = dc_field(repr=False)
    v: np.ndarray = dc_field(repr=False)
    w: np.ndarray = dc_field(repr=False)
    cells: np.ndarray | None = dc_field(default=None, repr=False)
    arcs: dict = dc_field(default_factory=dict, repr=False)

    @classmethod
    def from_matrix(cls, id, D) -> "Piece":
        D = np.asarray(D, dtype=float)
        n = D.shape[0]
        iu, ju = np.triu_indices(n, 1)
        w = np.minimum(D[iu, ju], D[ju, iu])
        keep = np.isfinite(w)
        return cls(str(id), n, iu[keep], ju[keep], w[keep])

    def csr(self):
        return build_csr(self.n_nodes, self.u, self.v, self.w)

    def metric_from(self, sources) -> np.ndarray:
        """Piece distances from each source, shape ``(len(sources), n_nodes)``."""
        indptr, idx, w = self.csr()
        out = np.empty((len(sources), self.n_nodes))
        for i, s in enumerate(np.asarray(sources, dtype=np.int64)):
            out[i] = kernels.csr_dijkstra(indptr, idx, w, np.array([s]), np.zeros(1), np.inf, -1)[0]
        return out


@dataclass(frozen=True, eq=False)
class Identification:
    """Pairs of identified points, each point given as ``(piece_id, node)``."""

    pairs: list

    def __len__(self):
        return len(self.pairs)


def identify_by_boundary_length(arc_a, arc_b, nu_a, nu_b, piece_a="a", piece_b="b",
                                tol: float = 0.02) -> Identification:
    """Match each node of ``arc_a`` to the ``arc_b`` node with the nearest length
    coordinate (ties towards the earlier node), after checking total lengths."""
    arc_a = np.asarray(arc_a)
    arc_b = np.asarray(arc_b)
    nu_a = np.asarray(nu_a, dtype=float)
    nu_b = np.asarray(nu_b, dtype=float)
    if len(arc_a) != len(nu_a) or len(arc_b) != len(nu_b) or len(arc_b) == 0:
        raise PreconditionError("each arc needs one coordinate per node")
    if np.any(np.diff(nu_a) < 0) or np.any(np.diff(nu_b) < 0):
        raise PreconditionError("length coordinates must be nondecreasing")
    ta, tb = float(nu_a[-1]), float(nu_b[-1])
    if abs(ta - tb) > tol * max(abs(ta), abs(tb), 1e-300):
        raise CalibrationError(f"arc lengths differ: {ta:g} vs {tb:g}")
    lo = np.searchsorted(nu_b, nu_a, side="left")
    j = np.clip(lo, 0, len(nu_b) - 1)
    jm = np.clip(j - 1, 0, len(nu_b) - 1)
    use_prev = np.abs(nu_a - nu_b[jm]) <= np.abs(nu_b[j] - nu_a)
    j = np.where(use_prev, jm, j)
    # runs of equal coordinates (several edges crossed at one point) pair up in order
    run_b = np.searchsorted(nu_b, nu_a, side="right") - lo
    rank_a = np.arange(len(nu_a)) - np.searchsorted(nu_a, nu_a, side="left")
    exact = run_b > 0
    j = np.where(exact, lo + np.minimum(rank_a, np.maximum(run_b - 1, 0)), j)
    return Identification([((piece_a, int(x)), (piece_b, int(arc_b[k]))) for x, k in zip(arc_a, j)])


def uniform_coordinates(n: int, total: float = 1.0) -> np.ndarray:
    """Cumulative coordinate of segment midpoints for ``n`` equal segments."""
    return (np.arange(n) + 0.5) * (total / n)


# ------------------------------------------------------------------ gluing

@dataclass(frozen=True, eq=False)
class GluedSpace:
    pieces: list
    identification: Identification
    classes: np.ndarray = dc_field(repr=False)  # class index per global node
    n_classes: int
    offsets: dict = dc_field(repr=False)
    route: str = "union"
    graph: tuple = dc_field(default=(), repr=False)
    graph_nodes: np.ndarray | None = dc_field(default=None, repr=False)  # class -> graph node
    audit: dict | None = None

    def node(self, point) -> int:
        pid, local = point
        if pid not in self.offsets:
            raise PreconditionError(f"unknown piece {pid!r}")
        return self.offsets[pid] + int(local)

    def class_of(self, point) -> int:
        return int(self.classes[self.node(point)])

    def _graph_node(self, point) -> int:
        c = self.class_of(point)
        if self.graph_nodes is None:
            return c
        g = int(self.graph_nodes[c])
        if g < 0:
            raise PreconditionError("point is not a node of the gluing graph; pass it as a query point")
        return g

    def distances_from(self, point) -> np.ndarray:
        indptr, idx, w = self.graph
        src = self._graph_node(point)
        return kernels.csr_dijkstra(indptr, idx, w, np.array([src]), np.zeros(1), np.inf, -1)[0]

    def distance(self, x, y) -> float:
        indptr, idx, w = self.graph
        a, b = self._graph_node(x), self._graph_node(y)
        d, _ = kernels.csr_dijkstra(indptr, idx, w, np.array([a]), np.zeros(1), np.inf, b)
        return float(d[b])

    def pair_distances(self, pairs) -> np.ndarray:
        out = np.empty(len(pairs))
        by_src: dict = {}
        for i, (x, y) in enumerate(pairs):
            by_src.setdefault(self._graph_node(x), []).append((i, self._graph_node(y)))
        indptr, idx, w = self.graph
        for s, items in by_src.items():
            d = kernels.csr_dijkstra(indptr, idx, w, np.array([s]), np.zeros(1), np.inf, -1)[0]
            for i, t in items:
                out[i] = d[t]
        return out


def _offsets(pieces):
    off, total = {}, 0
    for p in pieces:
        if p.id in off:
            raise PreconditionError(f"duplicate piece id {p.id!r}")
        off[p.id] = total
        total += p.n_nodes
    return off, total


def _quotient_classes(pieces, identification):
    off, total = _offsets(pieces)
    a, b = [], []
    for x, y in identification.pairs:
        for pid, local in (x, y):
            if pid not in off:
                raise PreconditionError(f"identification names unknown piece {pid!r}")
            n = next(p.n_nodes for p in pieces if p.id == pid)
            if not 0 <= int(local) < n:
                raise PreconditionError(f"node {local} outside piece {pid!r}")
        a.append(off[x[0]] + int(x[1]))
        b.append(off[y[0]] + int(y[1]))
    adj = coo_matrix((np.ones(len(a)), (np.array(a, int), np.array(b, int))), shape=(total, total))
    n_classes, labels = connected_components(adj, directed=False)
    return off, total, n_classes, labels


def glue(pieces, identification: Identification, route: str = "union", query=None,
         k: int | None = None, sparsify_above: int = 5000, audit_pairs: int = 100,
         rng=None) -> GluedSpace:
    """Quotient of ``pieces`` by ``identification``.

    ``route="union"`` merges identified nodes in the union of the piece graphs.
    ``route="gluing_graph"`` builds the graph on classes of ``query`` points
    and identified points; with more than ``sparsify_above`` nodes (or an
    explicit ``k``) each node keeps only its ``k`` (default 16) nearest
    neighbours per piece and an audit compares against the full graph.
    """
    pieces = list(pieces)
    off, total, n_classes, labels = _quotient_classes(pieces, identification)
    if route == "union":
        us, vs, ws = [], [], []
        for p in pieces:
            us.append(labels[off[p.id] + p.u])
            vs.append(labels[off[p.id] + p.v])
            ws.append(p.w)
        u = np.concatenate(us) if us else np.empty(0, int)
        v = np.concatenate(vs) if vs else np.empty(0, int)
        w = np.concatenate(ws) if ws else np.empty(0)
        keep = u != v
        graph = build_csr(n_classes, u[keep], v[keep], w[keep])
        return GluedSpace(pieces, identification, labels, n_classes, off, "union", graph)
    if route != "gluing_graph":
        raise PreconditionError(f"unknown route {route!r}")

    special = set()
    for x, y in identification.pairs:
        special.add(off[x[0]] + int(x[1]))
        special.add(off[y[0]] + int(y[1]))
    for q in (query or []):
        special.add(off[q[0]] + int(q[1]))
    special = np.array(sorted(special), dtype=np.int64)
    special_classes = np.unique(labels[special])
    graph_nodes = -np.ones(n_classes, dtype=np.int64)
    graph_nodes[special_classes] = np.arange(len(special_classes))
    n_graph = len(special_classes)

    def build(kk):
        us, vs, ws = [], [], []
        for p in pieces:
            loc = special[(special >= off[p.id]) & (special < off[p.id] + p.n_nodes)] - off[p.id]
            if len(loc) < 2:
                continue
            D = p.metric_from(loc)[:, loc]
            gi = graph_nodes[labels[off[p.id] + loc]]
            ii, jj = np.nonzero(np.isfinite(D) & ~np.eye(len(loc), dtype=bool))
            if kk is not None and kk < len(loc) - 1:
                order = np.argsort(np.where(np.eye(len(loc), dtype=bool), np.inf, D), axis=1)[:, :kk]
                ii = np.repeat(np.arange(len(loc)), kk)
                jj = order.ravel()
                ok = np.isfinite(D[ii, jj])
                ii, jj = ii[ok], jj[ok]
            a, b = gi[ii], gi[jj]
            sel = a != b
            us.append(np.minimum(a, b)[sel])
            vs.append(np.maximum(a, b)[sel])
            ws.append(D[ii, jj][sel])
        u = np.concatenate(us) if us else np.empty(0, np.int64)
        v = np.concatenate(vs) if vs else np.empty(0, np.int64)
        w = np.concatenate(ws) if ws else np.empty(0)
        return build_csr(n_graph, u, v, w)

    sparse = k is not None or n_graph > sparsify_above
    kk = (k or 16) if sparse else None
    graph = build(kk)
    audit = None
    if sparse:
        full = build(None)
        rng = rng if rng is not None else np.random.default_rng(0)
        m = min(audit_pairs, n_graph * (n_graph - 1) // 2)
        rel = []
        for _ in range(m):
            a, b = rng.choice(n_graph, size=2, replace=False)
            ds = kernels.csr_dijkstra(*graph, np.array([a]), np.zeros(1), np.inf, int(b))[0][b]
            df = kernels.csr_dijkstra(*full, np.array([a]), np.zeros(1), np.inf, int(b))[0][b]
            if np.isfinite(df) and df > 0:
                rel.append((ds - df) / df)
        rel = np.array(rel)
        audit = {"k": kk, "pairs": int(len(rel)),
                 "max_rel_error": float(rel.max()) if rel.size else 0.0,
                 "median_rel_error": float(np.median(rel)) if rel.size else 0.0}
    return GluedSpace(pieces, identification, labels, n_classes, off, "gluing_graph", graph,
                      graph_nodes, audit)


def chain_distance_bruteforce(pieces, identification: Identification, x, y,
                              max_len: int = 6) -> float:
    """Infimum over explicit chains with at most ``max_len`` piece steps.

    Pieces must be small; their metrics are taken as the shortest-path
    distances of their graphs.
    """
    pieces = list(pieces)
    off, total, _, labels = _quotient_classes(pieces, identification)
    piece_of = np.empty(total, dtype=int)
    D = np.full((total, total), np.inf)
    for i, p in enumerate(pieces):
        o = off[p.id]
        piece_of[o:o + p.n_nodes] = i
        D[o:o + p.n_nodes, o:o + p.n_nodes] = p.metric_from(np.arange(p.n_nodes))
    members = {c: np.flatnonzero(labels == c).tolist() for c in np.unique(labels)}
    xs = members[labels[off[x[0]] + int(x[1])]]
    target = labels[off[y[0]] + int(y[1])]
    best = math.inf
    # each chain: start anywhere in [x]; a step moves to any point of the
    # same piece, then jumps to any point equivalent to it
    stack = [(s, 0.0, 0) for s in xs]
    while stack:
        node, acc, steps = stack.pop()
        if labels[node] == target:
            best = min(best, acc)
        if steps == max_len:
            continue
        row = D[node]
        for nxt in np.flatnonzero(np.isfinite(row)).tolist():
            if nxt == node:
                continue
            val = acc + row[nxt]
            if val >= best:
                continue
            for jump in members[labels[nxt]]:
                stack.append((jump, val, steps + 1))
    return best


# ----------------------------------------------- glued versus direct metric

PIECE_MODES = ("restricted_field", "internal")


@dataclass(frozen=True, eq=False)
class GlueReport:
    d_direct: np.ndarray
    d_glued: np.ndarray
    pairs: np.ndarray  # (m, 2) flat cell indices
    n_interface: int
    n_components: int
    mode: str
    spacing: float
    epsilon: float

    @property
    def rel(self) -> np.ndarray:
        return (self.d_glued - self.d_direct) / self.d_direct

    @property
    def median_rel_discrepancy(self) -> float:
        return float(np.median(np.abs(self.rel)))

    @property
    def p90(self) -> float:
        return float(np.quantile(np.abs(self.rel), 0.9))

    def locality_ok(self, slack: float = 0.02) -> bool:
        return bool(np.all(self.rel >= -slack))

    def to_dict(self) -> dict:
        return {"median_rel_discrepancy": self.median_rel_discrepancy, "p90": self.p90,
                "min_rel": float(self.rel.min()), "max_rel": float(self.rel.max()),
                "pairs": int(len(self.rel)), "n_interface": self.n_interface,
                "n_components": self.n_components, "mode": self.mode,
                "spacing": self.spacing, "epsilon": self.epsilon}


def cut_pieces(field: GridField, params: LqgParams, trace, epsilon: float,
               xi: float | None = None, mode: str = "restricted_field",
               direct: DistanceOracle | None = None, max_crossings: int = 2):
    """Pieces left and right of ``trace`` with the severed edges subdivided at
    the crossing points; the two copies of each crossing point are identified.

    Returns ``(pieces, identification, cut, direct_oracle)``.  Piece nodes are
    the grid cells (global flat index) followed by one node per crossing.
    """
    if mode not in PIECE_MODES:
        raise PreconditionError(f"mode must be one of {PIECE_MODES}")
    grid = field.grid
    if direct is None:
        direct = build_oracle(field, params, epsilon, xi)
    cut = cut_grid_along_trace(grid, trace, max_crossings=max_crossings)
    lw_direct = direct.log_weight.ravel()
    su, sv = cut.severed
    severed_keys = su * grid.size + sv
    length = np.abs(grid.cell_point(cut.left) - grid.cell_point(cut.right))
    n_int = len(cut.left)
    pieces = []
    for sign, pid in ((1, "left"), (-1, "right")):
        sub = cut.side_mask(sign)
        if mode == "internal":
            lw = lw_direct
        else:
            lw = build_oracle(field.restricted(sub), params, epsilon, direct.xi).log_weight.ravel()
        u, v, ln = grid_edges(grid, sub)
        keep = ~np.isin(u.astype(np.int64) * grid.size + v, severed_keys)
        u, v, ln = u[keep], v[keep], ln[keep]
        w = ln * np.exp(0.5 * (lw[u] + lw[v]))
        cell = cut.left if sign > 0 else cut.right
        other = cut.right if sign > 0 else cut.left
        frac = cut.frac if sign > 0 else 1.0 - cut.frac
        inside = sub.ravel()[cell]
        if mode == "internal":
            hw = frac * length * np.exp(0.5 * (lw[cell] + lw[other]))
        else:
            hw = frac * length * np.exp(lw[cell])
        hu = cell[inside]
        hv = grid.size + np.flatnonzero(inside)
        pieces.append(Piece(pid, grid.size + n_int,
                            np.concatenate([u, hu]).astype(np.int64),
                            np.concatenate([v, hv]).astype(np.int64),
                            np.concatenate([w, hw[inside]]),
                            cells=np.concatenate([np.arange(grid.size), -np.ones(n_int, int)]),
                            arcs={"interface": (grid.size + np.arange(n_int), cut.position)}))
    arc_l, nu_l = pieces[0].arcs["interface"]
    arc_r, nu_r = pieces[1].arcs["interface"]
    ident = identify_by_boundary_length(arc_l, arc_r, nu_l, nu_r, "left", "right") if n_int else Identification([])
    return pieces, ident, cut, direct


def sample_typical_cells(measure_mass: np.ndarray, allowed: np.ndarray, n: int, rng) -> np.ndarray:
    """Flat cell indices drawn with probability proportional to the given mass."""
    p = np.where(np.asarray(allowed, bool), measure_mass, 0.0).ravel()
    if p.sum() <= 0:
        raise PreconditionError("no admissible mass to sample from")
    return rng.choice(p.size, size=n, p=p / p.sum())


def glued_vs_direct(field: GridField, params: LqgParams, trace, epsilon: float,
                    query_pairs, xi: float | None = None, mode: str = "restricted_field",
                    rng=None, weights=None, max_crossings: int = 2) -> GlueReport:
    """Compare the metric glued from the two sides of ``trace`` with the direct one.

    ``query_pairs`` is either a list of flat-cell pairs or a count; with a
    count, endpoints are drawn proportionally to ``weights`` (default uniform)
    on cells of the two pieces.
    """
    pieces, ident, cut, direct = cut_pieces(field, params, trace, epsilon, xi, mode,
                                            max_crossings=max_crossings)
    space = glue(pieces, ident, route="union")
    allowed = cut.side_mask(1) | cut.side_mask(-1)
    if isinstance(query_pairs, (int, np.integer)):
        rng = rng if rng is not None else np.random.default_rng(0)
        wts = np.ones(field.grid.shape) if weights is None else weights
        cells = sample_typical_cells(wts, allowed, 2 * int(query_pairs), rng).reshape(-1, 2)
        cells = cells[cells[:, 0] != cells[:, 1]]
    else:
        cells = np.asarray(query_pairs, dtype=np.int64).reshape(-1, 2)
        if not np.all(allowed.ravel()[cells]):
            raise PreconditionError("query cells must lie in one of the two pieces")
    side = np.where(cut.side_mask(1).ravel(), "left", "right")
    d_dir = direct.pair_distances([(int(a), int(b)) for a, b in cells])
    d_glu = space.pair_distances([((side[a], a), (side[b], b)) for a, b in cells])
    return GlueReport(d_dir, d_glu, cells, len(cut.left), cut.n_components, mode,
                      field.grid.spacing, float(epsilon))


def straight_trace(x: float, height: float, n: int = 2) -> SleTrace:
    """Vertical segment from ``x`` to ``x + i height``."""
    pts = x + 1j * np.linspace(0.0, height, n)
    return SleTrace(pts, np.linspace(0.0, 1.0, n), "chordal", 0.0)


def toy_instance(rng, n_a: int = 5, n_b: int = 5, n_pairs: int = 3):
    """Two random finite metric spaces with ``n_pairs`` identified point pairs."""
    pieces = []
    for pid, n in (("a", n_a), ("b", n_b)):
        pts = rng.random((n, 2))
        D = np.sqrt(((pts[:, None] - pts[None]) ** 2).sum(-1))
        # perturb the Euclidean metric; graph distances keep the triangle inequality
        D = D * (1 + 0.5 * rng.random(D.shape))
        D = np.minimum(D, D.T)
        np.fill_diagonal(D, 0.0)
        pieces.append(Piece.from_matrix(pid, D))
    ia = rng.choice(n_a, size=n_pairs, replace=False)
    ib = rng.choice(n_b, size=n_pairs, replace=False)
    ident = Identification([(("a", int(x)), ("b", int(y))) for x, y in zip(ia, ib)])
    return pieces, ident


def all_points(pieces):
    return [(p.id, i) for p in pieces for i in range(p.n_nodes)]


def pairs_of(points):
    return list(itertools.combinations(points, 2))
