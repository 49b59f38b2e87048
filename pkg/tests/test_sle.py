import math

import numpy as np
import pytest
from scipy import stats

from lqglab import kernels, sle
from lqglab.core import Grid, make_rng
from lqglab.errors import ParameterDomainError, PreconditionError, ResolutionError
from lqglab.lfpp import grid_edges
from lqglab.xlab import fit_exponent

# ---------------------------------------------------------------- drivers


def test_brownian_quadratic_variation():
    d = sle.sample_driving(3.0, 0.0, 0.0, 1e-4, 1.0, make_rng(0, "qv"))
    assert np.sum(np.diff(d.U) ** 2) == pytest.approx(3.0, rel=0.05)
    assert np.array_equal(d.U, d.U)  # finite
    assert d.T == pytest.approx(1.0)


def test_martingale_moments():
    kappa = 8 / 3
    rng = make_rng(1, "mart")
    dB = rng.standard_normal((2000, 100)) * math.sqrt(0.01)
    U, _, _ = sle.chordal_paths(kappa, 0.0, 0.0, 0.01, dB)
    uT = U[:, -1]
    assert abs(uT.mean()) < 3 * math.sqrt(kappa / 2000)
    assert uT.var() == pytest.approx(kappa, rel=0.05)


@pytest.mark.parametrize("rho1,rho2", [(0.0, 0.0), (-1.0, 2.0), (1.5, -0.5), (-1.5, -1.5)])
def test_force_point_ordering(rho1, rho2):
    d = sle.sample_driving(2.0, rho1, rho2, 1e-3, 2.0, make_rng(2, "ord", rho1, rho2))
    assert np.all(d.V1 <= d.U) and np.all(d.U <= d.V2)
    assert d.U[0] == d.V1[0] == d.V2[0] == 0.0


def test_force_point_drift_direction():
    # a strong left force point pushes U to the right on average
    rng = make_rng(3, "drift")
    dB = rng.standard_normal((500, 200)) * math.sqrt(1e-3)
    U, _, _ = sle.chordal_paths(2.0, 4.0, 0.0, 1e-3, dB)
    assert U[:, -1].mean() > 0.1


def test_rho_domain():
    with pytest.raises(ParameterDomainError):
        sle.sample_driving(2.0, -2.0, 0.0, 1e-3, 1.0, make_rng(0))
    with pytest.raises(ParameterDomainError):
        sle.sample_driving(0.0, 0.0, 0.0, 1e-3, 1.0, make_rng(0))
    with pytest.raises(ParameterDomainError):
        sle.radial_driving(2.0, -3.0, 1e-3, 1.0, make_rng(0))


def test_weights_to_rhos():
    assert sle.rhos_from_weights(2.0, 2.0) == (0.0, 0.0)
    assert sle.rhos_from_weights(1.0, 3.5) == (-1.0, 1.5)


def test_radial_unit_modulus():
    d = sle.radial_driving(2.0, 1.0, 1e-3, 2.0, make_rng(4, "rad"))
    assert np.max(np.abs(np.abs(d.U) - 1)) < 1e-9
    assert np.max(np.abs(np.abs(d.V1) - 1)) < 1e-9
    w = sle.whole_plane_driving(2.0, 1.0, 1e-3, 1.0, make_rng(4, "wp"), burn_in=1.0)
    assert np.max(np.abs(np.abs(w.U) - 1)) < 1e-9 and w.U[0] == pytest.approx(1.0)


def test_radial_angle_variance():
    kappa, t = 3.0, 0.5
    rng = make_rng(5, "ang")
    dB = rng.standard_normal((2000, 50)) * math.sqrt(t / 50)
    theta, _ = sle.radial_gap_paths(kappa, 0.0, t / 50, dB, math.pi)
    assert theta[:, -1].var() == pytest.approx(kappa * t, rel=0.05)


def test_whole_plane_stationary():
    kappa, rho, dt = 2.0, 1.0, 1e-3
    rng = make_rng(6, "stat")
    dB = rng.standard_normal((400, 8000)) * math.sqrt(dt)
    theta, phi = sle.radial_gap_paths(kappa, rho, dt, dB, math.pi)
    gap = np.mod(theta - phi, 2 * math.pi)
    assert stats.ks_2samp(gap[:, 4000], gap[:, 8000]).pvalue > 0.01
    d = sle.whole_plane_driving(kappa, rho, dt, 0.01, make_rng(0, "wpd"), burn_in=2.0)
    g = sle.angle_gap(d)
    assert np.all((g >= 0) & (g < 2 * math.pi))


# ------------------------------------------------------------------ traces

def test_zero_driving_trace():
    d = sle.constant_driving(0.0, 1e-4, 1.0)
    tr = sle.extract_trace(d, 101)
    t = tr.times[1:]
    assert np.allclose(tr.points[1:], 2j * np.sqrt(t), rtol=0.01)
    assert tr.points[0] == 0


def test_constant_driving_slit():
    d = sle.constant_driving(0.7, 1e-4, 0.5)
    tr = sle.extract_trace(d, 51)
    assert np.allclose(tr.points.real, 0.7, atol=1e-9)
    assert np.allclose(tr.points[1:].imag, 2 * np.sqrt(tr.times[1:]), rtol=0.01)


def test_hydrodynamic_normalization():
    d = sle.sample_driving(2.0, 0.0, 0.0, 1e-3, 1.0, make_rng(7, "hcap"))
    z = 100 * np.exp(1j * np.linspace(0.2, math.pi - 0.2, 7))
    g = sle.forward_map(d, z)
    assert np.allclose(g - z, 2 * d.T / z, rtol=0.01)


def test_trace_starts_at_origin_and_stays_up():
    d = sle.sample_driving(2.0, 0.0, 0.0, 1e-4, 0.1, make_rng(8, "tr"))
    tr = sle.extract_trace(d, 200)
    assert tr.points[0] == 0 and np.all(tr.points.imag >= 0)
    assert tr.truncated(10).points.shape == (10,)


def test_tip_forward_consistency():
    d = sle.sample_driving(2.0, 0.0, 0.0, 1e-4, 0.2, make_rng(9, "tip"))
    tr = sle.extract_trace(d, 60)
    steps = np.round(tr.times / d.dt).astype(int)
    err = []
    for z, k in zip(tr.points[1:], steps[1:]):
        # a point just above the tip maps close to U_t
        g = sle.forward_map(d, [z + 1e-6j], steps=k)[0]
        err.append(abs(g - d.U[k]))
    assert np.mean(np.array(err) < 1e-2) >= 0.95


def test_simple_curves():
    gaps = []
    for i in range(20):
        d = sle.sample_driving(2.0, 0.0, 0.0, 1e-4, 0.05, make_rng(i, "simple"))
        gaps.append(sle.self_intersection_gap(sle.extract_trace(d, 150).points))
    assert np.mean(np.array(gaps) > 0) >= 0.99


def test_self_intersection_gap_detects_crossing():
    assert sle.self_intersection_gap(np.array([0, 1, 1 + 1j, 0.5 - 1j])) == 0.0
    assert sle.self_intersection_gap(np.array([0, 1, 2, 3])) > 0


def test_scale_invariance():
    lam, dt = 4.0, 1e-3
    a, b = [], []
    for i in range(300):
        d1 = sle.sample_driving(2.0, 0.0, 0.0, dt, 1.0, make_rng(i, "sc1"))
        a.append(kernels.loewner_tips(d1.U, dt, np.array([d1.n_steps]))[0])
        d2 = sle.sample_driving(2.0, 0.0, 0.0, dt, lam, make_rng(i, "sc2"))
        b.append(kernels.loewner_tips(d2.U, dt, np.array([d2.n_steps]))[0] / math.sqrt(lam))
    assert stats.ks_2samp(np.abs(a), np.abs(b)).pvalue > 0.01


def test_trace_csv_roundtrip(tmp_path):
    d = sle.sample_driving(2.0, 0.0, 0.0, 1e-3, 0.1, make_rng(0, "csv"))
    tr = sle.extract_trace(d, 30)
    sle.write_trace_csv(tr, tmp_path / "t.csv")
    back = sle.read_trace_csv(tmp_path / "t.csv", 2.0)
    assert np.array_equal(back.points, tr.points) and np.array_equal(back.times, tr.times)
    (tmp_path / "bad.csv").write_text("a,b,c\n1,2,3\n")
    with pytest.raises(PreconditionError):
        sle.read_trace_csv(tmp_path / "bad.csv")


def test_radial_trace_rejected():
    d = sle.radial_driving(2.0, 0.0, 1e-3, 0.1, make_rng(0))
    with pytest.raises(PreconditionError):
        sle.extract_trace(d, 10)


# ------------------------------------------------------------------ cutting

def _vertical(x, h):
    return sle.SleTrace(np.array([x, x + 1j * h]), np.array([0.0, 1.0]))


def test_vertical_cut():
    g = Grid.half_plane(20, 10, 0.1)
    cut = sle.cut_grid_along_trace(g, _vertical(0.0, 2.0))
    assert cut.n_components == 2
    left, right = cut.side_mask(1), cut.side_mask(-1)
    x = g.points.real
    assert np.array_equal(left, x < 0) and np.array_equal(right, x > 0)
    assert np.all(g.cell_point(cut.left).real == pytest.approx(-0.05))
    assert np.all(g.cell_point(cut.right).real == pytest.approx(0.05))
    assert np.all(np.diff(cut.position) >= 0)


def test_partial_cut_single_component():
    g = Grid.half_plane(20, 10, 0.1)
    cut = sle.cut_grid_along_trace(g, _vertical(0.0, 0.5))
    assert cut.n_components == 1


def test_cut_conserves_edges():
    g = Grid.half_plane(40, 20, 0.05)
    d = sle.sample_driving(2.0, 0.0, 0.0, 1e-4, 0.3, make_rng(3, "cut"))
    tr = sle.extract_trace(d, 400)
    cut = sle.cut_grid_along_trace(g, tr, max_crossings=8)
    assert cut.n_components == 2
    u, v, _ = grid_edges(g, g.mask)
    keys = set((u * g.size + v).tolist())
    su, sv = cut.severed
    sev = set((su * g.size + sv).tolist())
    assert sev <= keys
    lab = cut.labels.ravel()
    kept = [(a, b) for a, b in zip(u.tolist(), v.tolist()) if a * g.size + b not in sev]
    inside = sum(lab[a] == lab[b] for a, b in kept)
    assert inside == len(kept)
    assert np.all(cut.labels[g.mask] >= 0)


def test_cut_resolution_error():
    g = Grid.half_plane(20, 10, 0.1)
    zig = np.array([0.0, 0.29j, 0.01 + 0.31j, 0.02 + 0.29j, 0.03 + 0.31j, 0.04 + 0.29j, 0.04 + 0.5j])
    with pytest.raises(ResolutionError):
        sle.cut_grid_along_trace(g, zig, max_crossings=2)


# --------------------------------------------------------------- bottleneck

def test_straight_bottleneck():
    pts = np.linspace(0, 1, 200) * (1 + 1j)
    tr = sle.SleTrace(pts, np.linspace(0, 1, 200))
    b = sle.bottleneck_statistics(tr, (0, 1, 0, 1), 100, np.random.default_rng(0))
    assert np.allclose(b.diameter, b.endpoint_distance, rtol=1e-12)
    fit = fit_exponent(np.log(b.endpoint_distance), np.log(b.diameter), n_boot=200)
    assert fit.slope == pytest.approx(1.0, abs=1e-9)


def test_bottleneck_kappa_two():
    d = sle.sample_driving(2.0, 0.0, 0.0, 1e-4, 0.25, make_rng(0, "bn"))
    tr = sle.extract_trace(d, 800)
    b = sle.bottleneck_statistics(tr, (-1, 1, 0.05, 2), 300, np.random.default_rng(1))
    assert np.all(b.diameter >= b.endpoint_distance)
    fit = fit_exponent(np.log(b.endpoint_distance), np.log(b.diameter), n_boot=300)
    assert fit.slope > 0.3 and fit.ci95[0] > 0


def test_bottleneck_partial_flag():
    tr = sle.SleTrace(np.array([0.1j, 5 + 5j, 6 + 5j]), np.arange(3.0))
    b = sle.bottleneck_statistics(tr, (-1, 1, 0, 1), 10, np.random.default_rng(0))
    assert b.partial
