"""Pure-Python reference versions of the compiled kernels.

Same algorithms and the same floating-point operation order as ``_ckernels``,
so shortest-path distances agree bit for bit.
"""

import heapq

import numpy as np


def csr_dijkstra(indptr, indices, weights, sources, source_dist,
                 limit=np.inf, target=-1):
    n = len(indptr) - 1
    ip = indptr.tolist()
    ix = indices.tolist()
    wt = weights.tolist()
    d_list = [np.inf] * n
    heap = []
    for u, d0 in zip(np.asarray(sources).tolist(), np.asarray(source_dist).tolist()):
        if d0 < d_list[u]:
            d_list[u] = d0
            heapq.heappush(heap, (d0, u))
    pred_list = [-1] * n
    done_list = [False] * n
    while heap:
        d, u = heapq.heappop(heap)
        if done_list[u]:
            continue
        if d > limit:
            break
        done_list[u] = True
        if u == target:
            break
        for e in range(ip[u], ip[u + 1]):
            v = ix[e]
            if done_list[v]:
                continue
            nd = d + wt[e]
            if nd < d_list[v]:
                d_list[v] = nd
                pred_list[v] = u
                heapq.heappush(heap, (nd, v))
    return np.array(d_list, dtype=float), np.array(pred_list, dtype=np.int64)


def _slit_inverse(w, c, four_dt):
    s = np.sqrt((w - c) * (w - c) - four_dt)
    flip = (s.imag < 0) | ((s.imag == 0) & (w.real - c < 0))
    s[flip] = -s[flip]
    return c + s


def loewner_tips(drive, dt, targets):
    """Vectorized over target times: step j acts on every target with k >= j."""
    drive = np.asarray(drive, dtype=float)
    targets = np.asarray(targets, dtype=np.int64)
    z = drive[targets].astype(np.complex128)
    four_dt = 4.0 * dt
    order = np.argsort(targets, kind="stable")
    sorted_k = targets[order]
    zs = z[order]
    kmax = int(sorted_k[-1]) if len(sorted_k) else 0
    for j in range(kmax, 0, -1):
        first = np.searchsorted(sorted_k, j, side="left")
        if first < len(sorted_k):
            zs[first:] = _slit_inverse(zs[first:], drive[j], four_dt)
    out = np.empty_like(z)
    out[order] = zs
    return out


def loewner_forward(drive, dt, points):
    drive = np.asarray(drive, dtype=float)
    z = np.array(points, dtype=np.complex128)
    four_dt = 4.0 * dt
    for j in range(1, len(drive)):
        c = drive[j]
        s = np.sqrt((z - c) * (z - c) + four_dt)
        flip = (s.imag < 0) | ((s.imag == 0) & (z.real - c < 0))
        s[flip] = -s[flip]
        z = c + s
    return z
