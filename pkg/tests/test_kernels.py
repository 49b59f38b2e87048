import os
import subprocess
import sys

import numpy as np
import pytest

from lqglab import _pykernels, fields, kernels, lfpp, sle
from lqglab.core import Grid, derive_params, make_rng

ck = pytest.importorskip("lqglab._ckernels")


@pytest.fixture(scope="module")
def graph():
    g = Grid.half_plane(40, 20, 0.1)
    f = fields.sample_free_boundary_half_plane(g, make_rng(0, "k"), refine=False)
    o = lfpp.build_oracle(f, derive_params(1.0), 0.2, xi=0.5)
    return o._csr()


@pytest.mark.parametrize("limit,target", [(np.inf, -1), (np.inf, 333), (0.8, -1)])
def test_dijkstra_backends_identical(graph, limit, target):
    ip, ix, w = graph
    src = np.array([5, 17], dtype=np.int64)
    sd = np.array([0.0, 0.25])
    dc, pc = ck.csr_dijkstra(ip, ix, w, src, sd, limit, target)
    dp, pp = _pykernels.csr_dijkstra(ip, ix, w, src, sd, limit, target)
    assert np.array_equal(dc, dp)
    assert np.array_equal(pc, pp)


def test_dijkstra_ties_identical():
    # unit weights on a grid produce many ties; tie-breaking must agree
    g = Grid.rectangle(15, 15, 1.0)
    u, v, L = lfpp.grid_edges(g, g.mask)
    ip, ix, w = lfpp.build_csr(g.size, u, v, np.ones_like(L))
    a = ck.csr_dijkstra(ip, ix, w, np.array([0], np.int64), np.zeros(1), np.inf, -1)
    b = _pykernels.csr_dijkstra(ip, ix, w, np.array([0], np.int64), np.zeros(1), np.inf, -1)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_loewner_backends_identical():
    d = sle.sample_driving(2.0, 0.0, 0.0, 1e-3, 0.5, make_rng(1, "lw"))
    targets = np.arange(0, d.n_steps + 1, 7, dtype=np.int64)
    a = ck.loewner_tips(d.U, d.dt, targets)
    b = _pykernels.loewner_tips(d.U, d.dt, targets)
    assert np.allclose(a, b, rtol=1e-12, atol=1e-14)
    z = np.array([0.3 + 0.5j, -1 + 2j, 5 + 0.1j])
    assert np.allclose(ck.loewner_forward(d.U, d.dt, z), _pykernels.loewner_forward(d.U, d.dt, z),
                       rtol=1e-12)


def test_default_backend_is_compiled():
    assert kernels.BACKEND == "cython"


def test_pure_switch():
    env = dict(os.environ, LQGLAB_PURE="1")
    out = subprocess.run([sys.executable, "-c", "from lqglab import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
