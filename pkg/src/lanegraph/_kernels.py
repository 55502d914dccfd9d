"""Hot inner loops, compiled with numba when available.

Set ``LANEGRAPH_NUMBA=0`` to force the pure-numpy implementations. Both paths
must agree to floating-point round-off; ``tests/test_kernels.py`` checks that.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None

USE_NUMBA = numba is not None and os.environ.get("LANEGRAPH_NUMBA", "1") not in ("0", "false", "no")


# ---------------------------------------------------------------- numpy paths

def scatter_add_rows_np(values, index, n_out):
    out = np.zeros((n_out, values.shape[1]), dtype=values.dtype)
    np.add.at(out, index, values)
    return out


def min_sq_dists_np(A, B):
    d = ((A[:, None, :] - B[None, :, :]) ** 2).sum(-1)
    return d.min(axis=1)


def turning_angles_np(P):
    d0 = P[1:-1] - P[:-2]
    d1 = P[2:] - P[1:-1]
    a = np.arctan2(d1[:, 1], d1[:, 0]) - np.arctan2(d0[:, 1], d0[:, 0])
    a = np.abs((a + np.pi) % (2 * np.pi) - np.pi)
    return a


def decimate_keep_np(P, tol):
    """Repeatedly drop the flattest interior point while its turning angle is below ``tol``."""
    keep = list(range(len(P)))
    while len(keep) > 2:
        ang = turning_angles_np(P[keep])
        k = int(np.argmin(ang))
        if ang[k] >= tol:
            break
        del keep[k + 1]
    mask = np.zeros(len(P), dtype=np.bool_)
    mask[keep] = True
    return mask


def w1_pairwise_np(HA, HB, bin_width):
    ca = np.cumsum(HA, axis=1)
    cb = np.cumsum(HB, axis=1)
    return np.abs(ca[:, None, :] - cb[None, :, :]).sum(-1) * bin_width


# ---------------------------------------------------------------- numba paths

if numba is not None:
    njit = numba.njit(cache=True, fastmath=False)

    @njit
    def scatter_add_rows_nb(values, index, n_out):
        out = np.zeros((n_out, values.shape[1]), dtype=values.dtype)
        for e in range(values.shape[0]):
            i = index[e]
            for h in range(values.shape[1]):
                out[i, h] += values[e, h]
        return out

    @njit
    def min_sq_dists_nb(A, B):
        out = np.empty(A.shape[0])
        for i in range(A.shape[0]):
            best = np.inf
            for j in range(B.shape[0]):
                dx = A[i, 0] - B[j, 0]
                dy = A[i, 1] - B[j, 1]
                d = dx * dx + dy * dy
                if d < best:
                    best = d
            out[i] = best
        return out

    @njit
    def _turn(P, a, b, c):
        t0 = np.arctan2(P[b, 1] - P[a, 1], P[b, 0] - P[a, 0])
        t1 = np.arctan2(P[c, 1] - P[b, 1], P[c, 0] - P[b, 0])
        x = t1 - t0
        x = (x + np.pi) % (2 * np.pi) - np.pi
        return abs(x)

    @njit
    def decimate_keep_nb(P, tol):
        n = P.shape[0]
        prev = np.arange(n) - 1
        nxt = np.arange(n) + 1
        alive = np.ones(n, dtype=np.bool_)
        ang = np.full(n, np.inf)
        for i in range(1, n - 1):
            ang[i] = _turn(P, i - 1, i, i + 1)
        while True:
            best = np.inf
            k = -1
            for i in range(1, n - 1):
                if alive[i] and ang[i] < best:
                    best = ang[i]
                    k = i
            if k < 0 or best >= tol:
                break
            alive[k] = False
            ang[k] = np.inf
            p, q = prev[k], nxt[k]
            nxt[p] = q
            prev[q] = p
            if p > 0:
                ang[p] = _turn(P, prev[p], p, q)
            if q < n - 1:
                ang[q] = _turn(P, p, q, nxt[q])
        return alive

    @njit
    def w1_pairwise_nb(HA, HB, bin_width):
        na, nb_, m = HA.shape[0], HB.shape[0], HA.shape[1]
        out = np.empty((na, nb_))
        for i in range(na):
            for j in range(nb_):
                ca = 0.0
                cb = 0.0
                s = 0.0
                for k in range(m):
                    ca += HA[i, k]
                    cb += HB[j, k]
                    s += abs(ca - cb)
                out[i, j] = s * bin_width
        return out


def scatter_add_rows(values, index, n_out):
    """Sum rows of ``values`` into ``n_out`` buckets given by ``index``."""
    values = np.ascontiguousarray(values)
    index = np.ascontiguousarray(index, dtype=np.int64)
    if USE_NUMBA:
        return scatter_add_rows_nb(values, index, int(n_out))
    return scatter_add_rows_np(values, index, int(n_out))


def min_sq_dists(A, B):
    """For every row of A, the squared distance to its nearest row of B."""
    A = np.ascontiguousarray(A, dtype=np.float64)
    B = np.ascontiguousarray(B, dtype=np.float64)
    if USE_NUMBA:
        return min_sq_dists_nb(A, B)
    return min_sq_dists_np(A, B)


def decimate_keep(P, tol):
    P = np.ascontiguousarray(P, dtype=np.float64)
    if len(P) <= 2:
        return np.ones(len(P), dtype=bool)
    if USE_NUMBA:
        return decimate_keep_nb(P, float(tol))
    return decimate_keep_np(P, float(tol))


def w1_pairwise(HA, HB, bin_width=1.0):
    """First Wasserstein distance between every pair of histograms on a shared grid."""
    HA = np.ascontiguousarray(HA, dtype=np.float64)
    HB = np.ascontiguousarray(HB, dtype=np.float64)
    if USE_NUMBA:
        return w1_pairwise_nb(HA, HB, float(bin_width))
    return w1_pairwise_np(HA, HB, float(bin_width))
