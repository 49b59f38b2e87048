"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 3] [--n 96]

Both backends are imported directly, so the result does not depend on
``LQGLAB_PURE``.  Outputs are checked for agreement before timing.
"""

import argparse
import math
import time

import numpy as np

from lqglab import _pykernels, fields, lfpp
from lqglab.core import Grid, derive_params, make_rng

try:
    from lqglab import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def dijkstra_case(n):
    g = Grid.half_plane(2 * n, n, 2.0 / n)
    f = fields.sample_free_boundary_half_plane(g, make_rng(0, "bench"), refine=False)
    o = lfpp.build_oracle(f, derive_params(math.sqrt(8 / 3), 4.0), 2 * g.spacing)
    indptr, idx, w = o._csr()
    src = np.array([g.nearest_cell(0.5j)[()]], dtype=np.int64)
    return lambda k: k.csr_dijkstra(indptr, idx, w, src, np.zeros(1), np.inf, -1)


def loewner_case(steps, n_out):
    rng = np.random.default_rng(1)
    dt = 1.0 / steps
    drive = np.concatenate([[0.0], np.cumsum(rng.standard_normal(steps) * math.sqrt(2 * dt))])
    targets = np.linspace(1, steps, n_out).astype(np.int64)
    pts = 100 * np.exp(1j * np.linspace(0.1, math.pi - 0.1, n_out)).astype(complex)
    return (lambda k: k.loewner_tips(drive, dt, targets),
            lambda k: k.loewner_forward(drive, dt, pts))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--n", type=int, default=96, help="grid height; width is 2n")
    ap.add_argument("--steps", type=int, default=2000, help="Loewner time steps")
    args = ap.parse_args()
    if _ckernels is None:
        raise SystemExit("compiled extension not available; build with pip install -e .")
    tips, fwd = loewner_case(args.steps, 200)
    cases = [(f"dijkstra {2 * args.n}x{args.n}", dijkstra_case(args.n)),
             (f"loewner_tips {args.steps} steps", tips),
             (f"loewner_forward {args.steps} steps", fwd)]
    print(f"{'kernel':<30}{'python s':>12}{'cython s':>12}{'speedup':>10}")
    for name, case in cases:
        tp, outp = best_of(lambda: case(_pykernels), args.repeat)
        tc, outc = best_of(lambda: case(_ckernels), args.repeat)
        a = outp[0] if isinstance(outp, tuple) else outp
        b = outc[0] if isinstance(outc, tuple) else outc
        if not np.allclose(a, b, rtol=1e-9, atol=1e-12):
            raise SystemExit(f"{name}: backends disagree")
        print(f"{name:<30}{tp:>12.4f}{tc:>12.4f}{tp / tc:>10.1f}")


if __name__ == "__main__":
    main()
