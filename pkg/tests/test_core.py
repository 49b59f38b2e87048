import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lqglab import fields
from lqglab.core import (ConformalMap, Grid, alpha_from_weight, bessel_dimension, derive_params,
                         load_config, make_rng, params_from_config, pushforward_field, s_plus,
                         wedge_weight)
from lqglab.errors import ParameterDomainError, PlaceholderError, PreconditionError

gammas = st.floats(min_value=0.01, max_value=1.99)


def test_q_at_gamma_one():
    assert derive_params(1.0).Q == 2.5


def test_q_near_two_from_above():
    qs = [derive_params(2 - d).Q for d in (1e-1, 1e-2, 1e-3)]
    assert all(q > 2 for q in qs)
    assert qs[0] > qs[1] > qs[2]
    assert qs[2] - 2 < 1e-6


def test_xi_with_override():
    p = derive_params(math.sqrt(8 / 3), 4.0)
    assert p.xi == pytest.approx(0.408248290463863, abs=1e-12)


@given(gammas)
def test_invariants(g):
    p = derive_params(g, 3.0)
    assert p.Q == 2 / g + g / 2
    assert p.Q > 2
    assert p.xi == g / 3.0
    assert 0 < p.s_plus < 1


def test_s_plus_formula():
    g = 1.3
    expect = (4 * g * g + 2 * math.sqrt(2) * g * math.sqrt((2 + g * g) * (8 + g * g))) / (4 + g * g) ** 2
    assert s_plus(g) == expect


@pytest.mark.parametrize("g", [0.0, 2.0, -1.0, 2.5])
def test_gamma_domain(g):
    with pytest.raises(ParameterDomainError):
        derive_params(g)


def test_dgamma_override_must_exceed_two():
    with pytest.raises(ParameterDomainError):
        derive_params(1.0, 2.0)


def test_placeholder_guard():
    p = derive_params(1.0)
    assert not p.has_dgamma
    with pytest.raises(PlaceholderError):
        p.require_dgamma()
    assert p.with_dgamma(3.5).require_dgamma().xi == 1 / 3.5


def test_weights():
    p = derive_params(1.2)
    g = p.gamma
    assert wedge_weight(p, g) == pytest.approx(2.0, abs=1e-12)
    assert wedge_weight(p, g - 2 / g) == pytest.approx(4.0, abs=1e-12)
    assert wedge_weight(p, p.Q) == pytest.approx(g * g / 2, abs=1e-12)
    assert bessel_dimension(p, p.Q) == 2.0


@given(gammas, st.floats(min_value=-3, max_value=2))
def test_weight_roundtrip(g, a):
    p = derive_params(g)
    if a >= p.Q + g / 2:
        return
    assert alpha_from_weight(p, wedge_weight(p, a)) == pytest.approx(a, abs=1e-12 * max(1, p.Q))


def test_rng_streams_independent_of_order():
    a1 = make_rng(7, "x", 1).standard_normal(3)
    make_rng(7, "y").standard_normal(10)
    a2 = make_rng(7, "x", 1).standard_normal(3)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, make_rng(7, "x", 2).standard_normal(3))


def test_grid_boundary_sorted():
    g = Grid.half_plane(11, 5, 0.1)
    x = g.cell_point(g.boundary_cells).real
    assert np.all(np.diff(x) > 0)
    assert len(g.boundary_cells) == 11
    assert g.is_mask_connected()


maps = [ConformalMap.mobius(1, 2, 0.5, 3), ConformalMap.scaling(2.5, 0.3 + 0.1j),
        ConformalMap.half_plane_to_strip(), ConformalMap.strip_to_half_plane()]


@pytest.mark.parametrize("m", maps, ids=lambda m: m.kind)
def test_map_inverse(m):
    z = np.array([0.3 + 0.7j, -1.2 + 0.4j, 2.0 + 1.5j])
    if m.kind == "strip_to_half_plane":
        z = np.array([0.3 + 0.5j, -1.0 + 2.0j, 1.5 + 3.0j])
    back = m.inverse(m(z))
    assert np.max(np.abs(back - z) / np.abs(z)) < 1e-10
    assert np.max(np.abs(m.inverted()(m(z)) - z)) < 1e-10


@pytest.mark.parametrize("m", maps, ids=lambda m: m.kind)
def test_map_derivative(m):
    z = np.array([0.3 + 0.7j, 1.1 + 1.9j])
    h = 1e-6
    fd = (m(z + h) - m(z - h)) / (2 * h)
    assert np.allclose(m.derivative(z), fd, rtol=1e-6)


def test_half_plane_strip_branch():
    m = ConformalMap.half_plane_to_strip()
    w = m(np.array([1j, -1 + 0j + 1e-12j, 1 + 1e-12j]))
    assert np.all((w.imag >= -1e-9) & (w.imag <= math.pi + 1e-9))


def test_pushforward_identity():
    g = Grid.half_plane(24, 12, 0.1)
    f = fields.sample_free_boundary_half_plane(g, make_rng(0, "pf"), refine=False)
    p = derive_params(1.0)
    out = pushforward_field(f, ConformalMap.identity(), g, p)
    assert np.allclose(out.values[out.grid.mask], f.values[out.grid.mask], atol=1e-12)


def test_pushforward_scaling_constant():
    g = Grid.half_plane(41, 21, 0.05)
    p = derive_params(1.0)
    f = fields.constant_field(g, 0.7)
    r = 0.5
    tgt = Grid.half_plane(21, 11, 0.05)
    out = pushforward_field(f, ConformalMap.scaling(r), tgt, p)
    assert np.allclose(out.values[out.grid.mask], 0.7 + p.Q * math.log(r), atol=1e-12)


def test_pushforward_masks_outside_cells():
    g = Grid.half_plane(11, 6, 0.1)
    p = derive_params(1.0)
    out = pushforward_field(fields.constant_field(g, 0.0), ConformalMap.scaling(3.0), g, p)
    assert 0 < out.grid.mask.sum() < g.mask.sum()


def test_load_config(tmp_path):
    with pytest.raises(PreconditionError, match="nope.json"):
        load_config(tmp_path / "nope.json")
    path = tmp_path / "c.json"
    path.write_text('{"gamma": 1.0, "d_gamma": 3.0, "seed": 4}')
    p = params_from_config(load_config(path))
    assert (p.gamma, p.d_gamma, p.seed) == (1.0, 3.0, 4)
