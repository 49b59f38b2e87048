# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: CSR Dijkstra and backward Loewner slit composition."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()

cdef extern from "complex.h" nogil:
    double complex csqrt(double complex z)
    double creal(double complex z)
    double cimag(double complex z)


cdef inline bint _less(double ka, long long na, double kb, long long nb) noexcept nogil:
    return ka < kb or (ka == kb and na < nb)


cdef inline void _push(double[::1] keys, long long[::1] nodes, long long *size,
                       double key, long long node) noexcept nogil:
    cdef long long i = size[0]
    cdef long long parent
    size[0] += 1
    while i > 0:
        parent = (i - 1) >> 1
        if _less(key, node, keys[parent], nodes[parent]):
            keys[i] = keys[parent]
            nodes[i] = nodes[parent]
            i = parent
        else:
            break
    keys[i] = key
    nodes[i] = node


cdef inline void _pop(double[::1] keys, long long[::1] nodes, long long *size,
                      double *key, long long *node) noexcept nogil:
    cdef long long n, i, child
    cdef double lk
    cdef long long ln
    key[0] = keys[0]
    node[0] = nodes[0]
    size[0] -= 1
    n = size[0]
    if n == 0:
        return
    lk = keys[n]
    ln = nodes[n]
    i = 0
    while True:
        child = 2 * i + 1
        if child >= n:
            break
        if child + 1 < n and _less(keys[child + 1], nodes[child + 1], keys[child], nodes[child]):
            child += 1
        if _less(keys[child], nodes[child], lk, ln):
            keys[i] = keys[child]
            nodes[i] = nodes[child]
            i = child
        else:
            break
    keys[i] = lk
    nodes[i] = ln


def csr_dijkstra(long long[::1] indptr, long long[::1] indices, double[::1] weights,
                 long long[::1] sources, double[::1] source_dist,
                 double limit=INFINITY, long long target=-1):
    cdef long long n = indptr.shape[0] - 1
    cdef long long m = indices.shape[0]
    dist_arr = np.full(n, np.inf)
    pred_arr = np.full(n, -1, dtype=np.int64)
    cdef double[::1] dist = dist_arr
    cdef long long[::1] pred = pred_arr
    cdef cnp.uint8_t[::1] done = np.zeros(n, dtype=np.uint8)
    cdef double[::1] hkeys = np.empty(m + sources.shape[0] + 1)
    cdef long long[::1] hnodes = np.empty(m + sources.shape[0] + 1, dtype=np.int64)
    cdef long long size = 0
    cdef long long i, u, v, e
    cdef double d, nd
    with nogil:
        for i in range(sources.shape[0]):
            u = sources[i]
            if source_dist[i] < dist[u]:
                dist[u] = source_dist[i]
                _push(hkeys, hnodes, &size, source_dist[i], u)
        while size > 0:
            _pop(hkeys, hnodes, &size, &d, &u)
            if done[u]:
                continue
            if d > limit:
                break
            done[u] = 1
            if u == target:
                break
            for e in range(indptr[u], indptr[u + 1]):
                v = indices[e]
                if done[v]:
                    continue
                nd = d + weights[e]
                if nd < dist[v]:
                    dist[v] = nd
                    pred[v] = u
                    _push(hkeys, hnodes, &size, nd, v)
    return dist_arr, pred_arr


cdef inline double complex _slit_inverse(double complex w, double c, double four_dt) noexcept nogil:
    cdef double complex s = csqrt((w - c) * (w - c) - four_dt)
    if cimag(s) < 0 or (cimag(s) == 0 and creal(w) - c < 0):
        s = -s
    return c + s


def loewner_tips(double[::1] drive, double dt, long long[::1] targets):
    """Tip positions at the given step indices by backward slit composition."""
    cdef long long nt = targets.shape[0]
    out_arr = np.empty(nt, dtype=np.complex128)
    cdef double complex[::1] out = out_arr
    cdef double four_dt = 4.0 * dt
    cdef long long a, j, k
    cdef double complex z
    with nogil:
        for a in range(nt):
            k = targets[a]
            z = drive[k]
            j = k
            while j >= 1:
                z = _slit_inverse(z, drive[j], four_dt)
                j -= 1
            out[a] = z
    return out_arr


def loewner_forward(double[::1] drive, double dt, double complex[::1] points):
    """Apply g_T = g_n o ... o g_1 to each point."""
    cdef long long n = drive.shape[0] - 1
    cdef long long npnt = points.shape[0]
    out_arr = np.empty(npnt, dtype=np.complex128)
    cdef double complex[::1] out = out_arr
    cdef double four_dt = 4.0 * dt
    cdef long long a, j
    cdef double complex z, s
    cdef double c
    with nogil:
        for a in range(npnt):
            z = points[a]
            for j in range(1, n + 1):
                c = drive[j]
                s = csqrt((z - c) * (z - c) + four_dt)
                if cimag(s) < 0 or (cimag(s) == 0 and creal(z) - c < 0):
                    s = -s
                z = c + s
            out[a] = z
    return out_arr
