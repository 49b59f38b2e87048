import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from lqglab import fields, lfpp
from lqglab.core import Grid, derive_params, make_rng
from lqglab.errors import PreconditionError, ResolutionError

XI = 0.4


@pytest.fixture(scope="module")
def small():
    g = Grid.half_plane(40, 20, 1 / 10)
    f = fields.sample_free_boundary_half_plane(g, make_rng(3, "lfpp"), refine=False)
    return g, f, lfpp.build_oracle(f, derive_params(1.0), 0.2, xi=XI)


def test_mollify_constant(half_grid):
    f = fields.constant_field(half_grid, 2.5)
    assert np.allclose(lfpp.mollify(f, 0.3).values, 2.5, rtol=0, atol=1e-13)


def test_mollify_delta():
    g = Grid.rectangle(41, 41, 0.1)
    v = np.zeros(g.shape)
    v[20, 20] = 1.0
    m = lfpp.mollify(fields.GridField(g, v), 0.3).values
    assert m.sum() == pytest.approx(1.0, rel=1e-9)
    sigma = 0.3 / math.sqrt(2) / 0.1
    assert m[20, 21] / m[20, 20] == pytest.approx(math.exp(-1 / (2 * sigma ** 2)), rel=1e-3)


def test_mollify_contracts_variance(fb_field):
    raw = fb_field.values[fb_field.grid.mask]
    m = lfpp.mollify(fb_field, 0.25).values[fb_field.grid.mask]
    assert m.var() < raw.var()


def test_mollify_resolution(half_grid):
    with pytest.raises(ResolutionError):
        lfpp.mollify(fields.constant_field(half_grid), 0.5 * half_grid.spacing)


def test_flat_field_is_octile():
    g = Grid.half_plane(30, 15, 0.1)
    o = lfpp.build_oracle(fields.constant_field(g, 0.0), derive_params(1.0), 0.1, xi=XI)
    rng = np.random.default_rng(0)
    for a, b in rng.integers(0, g.size, (40, 2)):
        d = o.distance(int(a), int(b))
        assert d == pytest.approx(lfpp.octile_distance(g, a, b), rel=1e-12, abs=1e-15)
        e = abs(g.cell_point(a) - g.cell_point(b))
        assert e * (1 - 1e-12) <= d <= 1.0824 * e + 1e-12


@settings(max_examples=25, deadline=None)
@given(c=st.floats(-3, 3))
def test_weyl_constant_exact(small, c):
    g, f, o = small
    p = derive_params(1.0)
    shifted = lfpp.build_oracle(f.shifted(c), p, 0.2, xi=XI)
    scaled = lfpp.weyl_scale(o, c)
    pairs = [(5, 700), (33, 402), (120, 799)]
    base = o.pair_distances(pairs)
    assert np.allclose(shifted.pair_distances(pairs), base * math.exp(XI * c), rtol=1e-12)
    assert np.allclose(scaled.pair_distances(pairs), base * math.exp(XI * c), rtol=1e-12)


def test_weyl_zero_identity(small):
    _, _, o = small
    w = lfpp.weyl_scale(o, 0.0)
    assert np.array_equal(w.edge_weight, o.edge_weight)


def test_weyl_field_matches_rebuild(small):
    g, f, o = small
    bump = np.exp(-np.abs(g.points - (0.3 + 0.5j)) ** 2)
    scaled = lfpp.weyl_scale(o, bump)
    lw = o.log_weight.ravel() + XI * bump.ravel()
    u, v, _ = o.edges()
    L = lfpp.grid_edges(g, g.mask)[2]
    assert np.allclose(scaled.edge_weight, L * np.exp(0.5 * (lw[u] + lw[v])), rtol=1e-12)


def test_weyl_rejects_nonfinite(small):
    _, _, o = small
    f = np.zeros(o.grid.shape)
    f[3, 3] = np.inf
    with pytest.raises(PreconditionError):
        lfpp.weyl_scale(o, f)


def test_dijkstra_matches_scipy(small):
    g, _, o = small
    u, v, w = o.edges()
    A = coo_matrix((w, (u, v)), shape=(g.size, g.size)).tocsr()
    ref = dijkstra(A, directed=False, indices=[0, 417, 799])
    ours = np.array([o.distances_from(np.array([s])).ravel() for s in (0, 417, 799)])
    assert np.allclose(ours, ref, rtol=1e-12)


def test_metric_axioms(small):
    g, _, o = small
    rng = np.random.default_rng(1)
    D = np.array([o.distances_from(np.array([s])).ravel() for s in range(0, g.size, 7)])
    src = np.arange(0, g.size, 7)
    assert np.allclose(D[:, src], D[:, src].T, rtol=1e-12)
    assert np.all(D[np.arange(len(src)), src] == 0)
    for _ in range(1000):
        i, j, k = rng.integers(0, len(src), 3)
        assert D[i, src[k]] <= D[i, src[j]] + D[j, src[k]] * (1 + 1e-12)
    assert np.all(o.edge_weight > 0)


def test_affine_covariance():
    """d_h(r u + z0, r v + z0) against d for h(r . + z0) + Q log r, rebuilt on the coarser grid."""
    p = derive_params(1.0, 4.0)
    fine = Grid.half_plane(128, 64, 1 / 32)
    f = fields.sample_free_boundary_half_plane(fine, make_rng(6, "affine"), refine=False)
    r = 2.0
    coarse = Grid.half_plane(64, 32, 1 / 16)
    from lqglab.core import ConformalMap, pushforward_field

    g = pushforward_field(f, ConformalMap.scaling(1 / r), coarse, p)
    eps = 4 / 32
    d_fine = lfpp.build_oracle(f, p, eps, normalize=True)
    d_coarse = lfpp.build_oracle(g, p, r * eps, normalize=True)
    rng = np.random.default_rng(2)
    ratios = []
    for _ in range(20):
        u, v = rng.uniform(-1.5, 1.5, 2) + 1j * rng.uniform(0.3, 1.5, 2)
        ratios.append(d_fine.distance(u / r, v / r) / d_coarse.distance(u, v))
    # eps^(xi Q - 1) normalization makes the scale factor r^(xi Q) * r^(1 - xi Q) * r^-1 = 1
    assert np.median(np.abs(np.log(ratios))) < 0.10


def test_internal_distance(small):
    g, _, o = small
    full = np.ones(g.shape, bool)
    assert lfpp.internal_distance(o, full, 10, 500) == o.distance(10, 500)
    rng = np.random.default_rng(4)
    V = np.zeros(g.shape, bool)
    V[2:18, 3:37] = True
    U = V.copy()
    U[8:12, 15:25] = False
    cells = np.flatnonzero(U.ravel())
    for a, b in rng.choice(cells, (100, 2)):
        dU = lfpp.internal_distance(o, U, int(a), int(b))
        dV = lfpp.internal_distance(o, V, int(a), int(b))
        assert dU >= dV * (1 - 1e-12)
        assert dV >= o.distance(int(a), int(b)) * (1 - 1e-12)


def test_internal_wall(small):
    g, _, o = small
    U = np.ones(g.shape, bool)
    U[:, 20] = False
    d, ok = o.query(5, 30, subdomain=U)
    assert not ok and d == np.inf
    assert lfpp.internal_distance(o, U, 5, 30) == np.inf
    with pytest.raises(PreconditionError):
        lfpp.internal_distance(o, U, 5, 20)


def test_metric_ball(small):
    g, _, o = small
    c = g.nearest_cell(0.0 + 1.0j)[()]
    tiny = lfpp.metric_ball(o, int(c), 1e-12)
    assert tiny.sum() == 1 and tiny.ravel()[c]
    b1 = lfpp.metric_ball(o, int(c), 0.2)
    b2 = lfpp.metric_ball(o, int(c), 0.4)
    assert np.all(b2[b1])


def test_flat_ball_is_disc():
    g = Grid.centered(101, 101, 0.02)
    o = lfpp.build_oracle(fields.constant_field(g, 0.0), derive_params(1.0), 0.02, xi=XI)
    ball = lfpp.metric_ball(o, g.nearest_cell(0j)[()], 0.8)
    disc = np.abs(g.points) < 0.8
    assert np.sum(ball ^ disc) <= 0.10 * disc.sum()


def test_boundary_distance(small):
    g, _, o = small
    assert lfpp.boundary_distance(o, 0.25, 0.25) == 0.0
    a, b = -1.05, 0.95
    d = lfpp.boundary_distance(o, a, b)
    cells = lfpp.boundary_cells_in(g, a, b)
    lw = o.log_weight.ravel()[cells]
    along = np.sum(g.spacing * np.exp(0.5 * (lw[1:] + lw[:-1])))
    assert d <= along * (1 + 1e-12)
    # interior detours only: drop the boundary row except the endpoints
    U = np.ones(g.shape, bool)
    U[0, :] = False
    U.ravel()[cells[[0, -1]]] = True
    assert lfpp.internal_distance(o, U, cells[0], cells[-1]) >= d


def test_boundary_neighborhood(small):
    g, _, o = small
    nb = lfpp.boundary_neighborhood(o, (-0.5, 0.5), 0.3)
    assert nb.ravel()[lfpp.boundary_cells_in(g, -0.5, 0.5)].all()
    assert np.all(lfpp.boundary_neighborhood(o, (-0.5, 0.5), 0.6)[nb])


def test_locality_far_field():
    """Distances do not change when the field is re-randomized away from the geodesic."""
    g = Grid.half_plane(48, 24, 1 / 12)
    p = derive_params(1.0)
    f = fields.sample_free_boundary_half_plane(g, make_rng(0, "loc"), refine=False)
    o = lfpp.build_oracle(f, p, 2 / 12, xi=XI)
    other = fields.sample_free_boundary_half_plane(g, make_rng(1, "loc"), refine=False)
    rng = np.random.default_rng(5)
    reach = int(math.ceil(4 * (2 / 12) / math.sqrt(2) / g.spacing)) + 1
    for a, b in rng.integers(0, g.size, (50, 2)):
        path = o.path(int(a), int(b))
        near = np.zeros(g.shape, bool)
        near.ravel()[path] = True
        # the mollifier and one edge reach this far
        from scipy.ndimage import binary_dilation
        near = binary_dilation(near, np.ones((3, 3), bool), iterations=reach + 1)
        mixed = fields.GridField(g, np.where(near, f.values, other.values))
        o2 = lfpp.build_oracle(mixed, p, 2 / 12, xi=XI)
        # the old geodesic keeps its length; other paths may only get shorter
        L = o2.distance(int(a), int(b))
        lw = o2.log_weight.ravel()
        steps = np.abs(np.diff(g.cell_point(path)))
        along = np.sum(steps * np.exp(0.5 * (lw[path[1:]] + lw[path[:-1]])))
        assert along == pytest.approx(o.distance(int(a), int(b)), rel=1e-9)
        assert L <= along * (1 + 1e-12)


def test_path_is_geodesic(small):
    g, _, o = small
    path = o.path(3, 777)
    assert path[0] == 3 and path[-1] == 777
    lw = o.log_weight.ravel()
    steps = np.abs(np.diff(g.cell_point(path)))
    assert np.sum(steps * np.exp(0.5 * (lw[path[1:]] + lw[path[:-1]]))) == pytest.approx(o.distance(3, 777))
    assert np.array_equal(o.path(3, 777), path)


def test_geodesic_uniqueness_proxy(small):
    _, _, o = small
    rng = np.random.default_rng(8)
    pairs = rng.integers(0, o.grid.size, (40, 2))
    same = [np.array_equal(o.path(int(a), int(b)), o.path(int(b), int(a))[::-1]) for a, b in pairs]
    assert np.mean(same) >= 0.95


def test_normalize_shift(small):
    g, f, o = small
    n = lfpp.build_oracle(f, derive_params(1.0), 0.2, xi=XI, normalize=True)
    fac = 0.2 ** (XI * derive_params(1.0).Q - 1)
    assert n.distance(4, 600) == pytest.approx(o.distance(4, 600) * fac, rel=1e-12)


def test_xi_requires_dgamma(small):
    _, f, _ = small
    with pytest.raises(PreconditionError):
        lfpp.build_oracle(f, derive_params(1.0), 0.2)


def test_severed_edges(small):
    g, _, o = small
    col = np.arange(g.ny) * g.nx + 20
    us, vs = [], []
    for c in col:
        for d in (-g.nx - 1, -1, g.nx - 1):
            nb = c + d
            if 0 <= nb < g.size and (nb % g.nx) == 19:
                us.append(nb)
                vs.append(c)
    cut = lfpp.with_severed(o, us, vs)
    assert cut.distance(5, 30) == np.inf
    assert cut.distance(5, 15) >= o.distance(5, 15)


def test_weyl_harmonic_part():
    """Removing the harmonic part by Weyl scaling matches the oracle of the zero-boundary part."""
    g = Grid.rectangle(60, 60, 1 / 20)
    h = fields.sample_zero_boundary(g, make_rng(0, "wh"))
    U = np.zeros(g.shape, bool)
    U[10:50, 10:50] = True
    h0, harm = fields.domain_markov_decompose(h, U)
    p = derive_params(1.0)
    eps = 2 / 20
    # build both on U so the mollifier sees the same domain
    o = lfpp.build_oracle(h.restricted(U), p, eps, xi=XI)
    via_weyl = lfpp.weyl_scale(o, -np.where(U, harm.values, 0.0))
    direct = lfpp.build_oracle(h0, p, eps, xi=XI)
    rng = np.random.default_rng(0)
    inner = np.flatnonzero((U & ~h0.grid.boundary_mask()).ravel())
    pairs = [tuple(map(int, rng.choice(inner, 2, replace=False))) for _ in range(30)]
    r = via_weyl.pair_distances(pairs, subdomain=U) / direct.pair_distances(pairs, subdomain=U)
    assert np.median(np.abs(np.log(r))) < 0.05
