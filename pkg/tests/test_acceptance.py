"""Acceptance criteria, one PASS/FAIL line each.

Monte Carlo criteria read experiment summaries through the result cache in
``results/cache``; a missing or stale entry is recomputed (the exponent and
gluing suites take a while).  Criteria the desk-scale runs do not meet are
marked ``xfail(strict=True)``: they still print FAIL, and start erroring if a
later run passes them.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from lqglab import fields, glue, gmc, lfpp, sle, xlab
from lqglab.core import Grid, derive_params, make_rng

CACHE = Path(__file__).resolve().parents[1] / "results" / "cache"


@pytest.fixture
def report(capsys):
    def _report(label, ok, detail=""):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {label}: {detail}")
        return ok

    return _report


def summary(name):
    return xlab.cached_run(name, None, None, CACHE)["summary"]


# ------------------------------------------------------- 1. exactness suite

def _weyl_exact():
    g = Grid.half_plane(40, 20, 1 / 10)
    f = fields.sample_free_boundary_half_plane(g, make_rng(1, "acc-weyl"), refine=False)
    p = derive_params(1.0)
    o = lfpp.build_oracle(f, p, 0.2, xi=0.4)
    pairs = [(5, 700), (33, 402), (120, 799)]
    base = o.pair_distances(pairs)
    worst = 0.0
    for c in (-2.0, 0.5, 1.7):
        for oc in (lfpp.weyl_scale(o, c), lfpp.build_oracle(f.shifted(c), p, 0.2, xi=0.4)):
            worst = max(worst, np.max(np.abs(oc.pair_distances(pairs) / (base * math.exp(0.4 * c)) - 1)))
    return worst


def _gmc_shift_exact():
    g = Grid.half_plane(32, 16, 1 / 8)
    f = fields.sample_free_boundary_half_plane(g, make_rng(2, "acc-gmc"), refine=False)
    worst = 0.0
    for gamma in (0.5, 1.0, 1.9):
        p = derive_params(gamma)
        for c in (-1.5, 2.0):
            a0 = gmc.area_measure(f, p, 0.25).cell_mass
            a1 = gmc.area_measure(f.shifted(c), p, 0.25).cell_mass
            b0 = gmc.boundary_measure(f, p, 0.25).cell_mass
            b1 = gmc.boundary_measure(f.shifted(c), p, 0.25).cell_mass
            worst = max(worst, np.max(np.abs(a1 / (a0 * math.exp(gamma * c)) - 1)),
                        np.max(np.abs(b1 / (b0 * math.exp(gamma * c / 2)) - 1)))
    return worst


def _octile_exact():
    g = Grid.half_plane(30, 15, 0.1)
    o = lfpp.build_oracle(fields.constant_field(g, 0.0), derive_params(1.0), 0.1, xi=0.4)
    src = 37
    d = o.distances_from(np.array([src])).ravel()
    ref = np.array([lfpp.octile_distance(g, src, c) for c in range(g.size)])
    return float(np.max(np.abs(d - ref)))


def _straight_cut_exact():
    g = Grid.half_plane(48, 24, 1 / 12)
    f = fields.sample_free_boundary_half_plane(g, make_rng(4, "acc-cut"), refine=False)
    rep = glue.glued_vs_direct(f, derive_params(math.sqrt(8 / 3), 4.0), glue.straight_trace(0.0, 3.0),
                               2 / 12, 60, xi=0.4, mode="internal", rng=np.random.default_rng(0))
    return float(np.max(np.abs(rep.d_glued / rep.d_direct - 1)))


def _toy_exact():
    worst = 0.0
    for seed in range(10):
        pieces, ident = glue.toy_instance(np.random.default_rng(seed))
        pts = glue.all_points(pieces)
        sp = glue.glue(pieces, ident)
        for x, y in glue.pairs_of(pts):
            ref = glue.chain_distance_bruteforce(pieces, ident, x, y, max_len=6)
            worst = max(worst, abs(sp.distance(x, y) - ref))
    return worst


def test_criterion_1_exactness(report):
    t0 = time.perf_counter()
    checks = {"weyl": _weyl_exact(), "gmc_shift": _gmc_shift_exact(), "octile": _octile_exact(),
              "straight_cut": _straight_cut_exact(), "toy_bruteforce": _toy_exact()}
    elapsed = time.perf_counter() - t0
    ok = all(v < 1e-12 for v in checks.values()) and elapsed < 60
    detail = ", ".join(f"{k} err {v:.1e}" for k, v in checks.items()) + f"; {elapsed:.1f}s"
    assert report("1 exactness suite", ok, detail)


# ------------------------------------------------ 2. Gaussian-structure suite

def test_criterion_2_increment_variance(report):
    s = summary("gaussian")
    ratios = [s["increment"]["ratio"], s["increment_at_origin"]["ratio"]]
    ok = all(abs(r - 1) <= 0.10 for r in ratios)
    assert report("2 increment variance = 2 dt +-10%", ok,
                  f"ratio off origin {ratios[0]:.3f}, at origin {ratios[1]:.3f}")


def test_criterion_2_sup_increment_law(report):
    s = summary("gaussian")
    ok = s["ks_pvalue"] > 0.01
    assert report("2 sup increment ~ Exp(Q)", ok,
                  f"KS p {s['ks_pvalue']:.3f}, mean {s['mean_sup']:.4f} vs 1/Q {1 / s['Q']:.4f}")


def test_criterion_2_covariance_bound(report):
    s = summary("covariance")
    ok = s["violation_rate"] <= 0.01
    assert report("2 covariance modulus bound", ok, f"violation rate {s['violation_rate']:.3f}")


# ------------------------------------------------------------ 3. Loewner suite

def test_criterion_3_loewner(report):
    t0 = time.perf_counter()
    d = sle.constant_driving(0.0, 1e-4, 1.0)
    tr = sle.extract_trace(d, 101)
    tip = float(np.max(np.abs(tr.points[1:] / (2j * np.sqrt(tr.times[1:])) - 1)))
    d = sle.sample_driving(2.0, 0.0, 0.0, 1e-3, 1.0, make_rng(7, "acc-hcap"))
    z = 100 * np.exp(1j * np.linspace(0.2, math.pi - 0.2, 9))
    g = sle.forward_map(d, z)
    hydro = float(np.max(np.abs((g - z) / (2 * d.T / z) - 1)))
    violations = 0
    for rho1, rho2 in [(0.0, 0.0), (2.0, 0.0), (0.0, 2.0), (-1.5, 4.0), (1.0, -1.0)]:
        for seed in range(5):
            d = sle.sample_driving(2.0, rho1, rho2, 1e-3, 1.0, make_rng(seed, "acc-ord", rho1, rho2))
            violations += int(np.sum(d.V1 > d.U) + np.sum(d.U > d.V2))
    elapsed = time.perf_counter() - t0
    ok = tip <= 0.01 and hydro <= 0.01 and violations == 0 and elapsed < 120
    assert report("3 Loewner suite", ok, f"tip err {tip:.1e}, hydrodynamic err {hydro:.1e}, "
                                         f"ordering violations {violations}; {elapsed:.1f}s")


# ------------------------------------------------------------ 4. exponent suite

def test_criterion_4_dgamma_above_two(report):
    s = summary("dgamma")
    lo, hi = s["ci95"]
    assert report("4 d_gamma CI above 2", lo > 2, f"d_hat {s['d_hat']:.3f}, CI [{lo:.3f}, {hi:.3f}]")


@pytest.mark.xfail(strict=True, reason="ball-volume fixed point settles near 2.5 at 512^2")
def test_criterion_4_dgamma_window(report):
    s = summary("dgamma")
    ok = 3.2 <= s["d_hat"] <= 4.8
    path = " -> ".join(f"{h['d_out']:.2f}" for h in s["history"])
    assert report("4 d_gamma in [3.2, 4.8]", ok, f"d_hat {s['d_hat']:.3f}; iterates from 3.0: {path}")


def test_criterion_4_distance_vs_nu(report):
    s = summary("distance_vs_nu")
    ok = 0.35 <= s["slope_top"] <= 0.65
    assert report("4 distance vs boundary length slope", ok,
                  f"slope {s['slope_top']:.3f}, target {s['target']:.3f}")


def test_criterion_4_holder(report):
    s = summary("holder")
    ok = s["brackets"]
    assert report("4 boundary Holder envelopes", ok,
                  f"upper slope {s['upper_envelope_slope']:.3f} >= {s['lower_target']:.3f} - 0.15, "
                  f"lower slope {s['lower_envelope_slope']:.3f} <= {s['upper_target']:.3f} + 0.15")


@pytest.mark.xfail(strict=True, reason="thick-point ratio below 1.2 and not monotone at desk scale")
def test_criterion_4_thick_point(report):
    s = summary("thick_point")
    top = s["finest_ratio_top"]
    ok = 1.2 <= top <= 2.6 and s["finest_nonincreasing"]
    ratios = [s[k] for k in sorted(s) if k.startswith("mean_ratio_finest_")]
    assert report("4 thick-point max ratio", ok,
                  f"finest-eps ratios {', '.join(f'{r:.3f}' for r in ratios)}; "
                  f"in [1.2, 2.6] {1.2 <= top <= 2.6}, nonincreasing {s['finest_nonincreasing']}")


def test_criterion_4_bottleneck(report):
    s = summary("bottleneck")
    lo, hi = s["ci95"]
    ok = s["ci_excludes_zero"] and lo > 0
    assert report("4 bottleneck exponent", ok, f"zeta {s['zeta']:.3f}, CI [{lo:.3f}, {hi:.3f}]")


def test_criterion_4_volume_bound(report):
    s = summary("volume_bound")
    ok = s["stable_within_3"]
    assert report("4 boundary volume bound", ok,
                  f"M_hat {s['M_hat_median_256']:.3f} -> {s['M_hat_median_512']:.3f}, "
                  f"factor {s['factor']:.2f}")


# ------------------------------------------------------------- 5. gluing

def test_criterion_5_gluing_discrepancy(report):
    s = summary("gluing")
    ex = s["excess_medians"]
    ok = s["nonincreasing"] and s["top_within_10pct"]
    assert report("5 gluing median discrepancy", ok,
                  f"excess medians {', '.join(f'{e:.4f}' for e in ex)} over 128/256/512")


@pytest.mark.xfail(strict=True, reason="a few glued distances fall more than 2% below direct ones")
def test_criterion_5_gluing_locality(report):
    s = summary("gluing")
    ok = s["locality_all_pairs"]
    assert report("5 gluing locality bound", ok,
                  f"{s['locality_violations']} pairs below -2%, "
                  f"min rel {min(s[k] for k in s if k.startswith('min_rel_')):.4f}")
