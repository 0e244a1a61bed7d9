# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled loops: per-vertex least-squares differentials and pair-ratio scans."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY

cnp.import_array()


cdef int _cholesky_solve(double[:, ::1] A, double[:, ::1] B, int P, int k, double rel_tol) noexcept nogil:
    """In-place Cholesky of the leading P x P block of A and solve A X = B (P x k).
    Returns 1 if a pivot falls below rel_tol * max diagonal."""
    cdef int i, j, c
    cdef double s, dmax = 0.0
    for i in range(P):
        if A[i, i] > dmax:
            dmax = A[i, i]
    for j in range(P):
        s = A[j, j]
        for c in range(j):
            s -= A[j, c] * A[j, c]
        if s <= rel_tol * dmax:
            return 1
        A[j, j] = sqrt(s)
        for i in range(j + 1, P):
            s = A[i, j]
            for c in range(j):
                s -= A[i, c] * A[j, c]
            A[i, j] = s / A[j, j]
    for c in range(k):
        for i in range(P):
            s = B[i, c]
            for j in range(i):
                s -= A[i, j] * B[j, c]
            B[i, c] = s / A[i, i]
        for i in range(P - 1, -1, -1):
            s = B[i, c]
            for j in range(i + 1, P):
                s -= A[j, i] * B[j, c]
            B[i, c] = s / A[i, i]
    return 0


def local_fit(cnp.int64_t[::1] indptr, double[:, ::1] disp, double[::1] weights,
              int order, double rel_tol=1e-10):
    """Gradient stencil coefficients from weighted least squares.

    For vertex p with neighbor entries e in [indptr[p], indptr[p+1]) and tangent
    displacements disp[e], returns G (E x n) with
    grad f(p) = sum_e G[e] * (f(q_e) - f(p)). A quadratic model is used when the
    neighborhood supports it, otherwise a linear one.
    status[p] = 0 (quadratic), 1 (linear fallback), 2 (rank deficient).
    """
    cdef Py_ssize_t N = indptr.shape[0] - 1
    cdef Py_ssize_t E = disp.shape[0]
    cdef int n = disp.shape[1]
    cdef int nq = n * (n + 1) // 2
    cdef int Pmax = n + (nq if order >= 2 else 0)
    cdef Py_ssize_t p, e, lo, hi
    cdef int kdeg, maxdeg = 0, a, b, i, j, col, P, attempt, bad
    cdef double scale, w
    for p in range(N):
        if indptr[p + 1] - indptr[p] > maxdeg:
            maxdeg = <int>(indptr[p + 1] - indptr[p])

    G_arr = np.zeros((E, n), dtype=np.float64)
    status_arr = np.zeros(N, dtype=np.int8)
    feat_arr = np.zeros((max(maxdeg, 1), Pmax), dtype=np.float64)
    A_arr = np.zeros((Pmax, Pmax), dtype=np.float64)
    B_arr = np.zeros((Pmax, max(maxdeg, 1)), dtype=np.float64)
    cdef double[:, ::1] G = G_arr
    cdef signed char[::1] status = status_arr
    cdef double[:, ::1] feat = feat_arr
    cdef double[:, ::1] A = A_arr
    cdef double[:, ::1] B = B_arr

    with nogil:
        for p in range(N):
            lo = indptr[p]
            hi = indptr[p + 1]
            kdeg = <int>(hi - lo)
            scale = 0.0
            for e in range(lo, hi):
                w = 0.0
                for a in range(n):
                    w += disp[e, a] * disp[e, a]
                scale += sqrt(w)
            if kdeg == 0 or scale <= 0.0:
                status[p] = 2
                continue
            scale /= kdeg
            for e in range(lo, hi):
                i = <int>(e - lo)
                for a in range(n):
                    feat[i, a] = disp[e, a] / scale
                col = n
                for a in range(n):
                    for b in range(a, n):
                        if col < Pmax:
                            feat[i, col] = feat[i, a] * feat[i, b]
                        col += 1
            bad = 1
            for attempt in range(2):
                if attempt == 0:
                    P = Pmax
                    if P == n or kdeg < P + 1:
                        continue
                else:
                    P = n
                for i in range(P):
                    for j in range(P):
                        A[i, j] = 0.0
                    for j in range(kdeg):
                        B[i, j] = 0.0
                for e in range(lo, hi):
                    j = <int>(e - lo)
                    w = weights[e]
                    for i in range(P):
                        B[i, j] = w * feat[j, i]
                        for a in range(i + 1):
                            A[i, a] += w * feat[j, i] * feat[j, a]
                for i in range(P):
                    for a in range(i + 1, P):
                        A[i, a] = A[a, i]
                bad = _cholesky_solve(A, B, P, kdeg, rel_tol)
                if bad == 0:
                    status[p] = 0 if P > n else (1 if Pmax > n else 0)
                    for e in range(lo, hi):
                        j = <int>(e - lo)
                        for a in range(n):
                            G[e, a] = B[a, j] / scale
                    break
            if bad:
                status[p] = 2
    return G_arr, status_arr


def pair_extrema(double[:, ::1] H, cnp.int64_t[::1] sources, double[:, ::1] dist, double separation):
    """Min / max of |H_i - H_j| / d(i, j) over pairs j > i with d >= separation.

    Row b of ``dist`` holds distances from vertex sources[b] to every vertex.
    Returns (min_ratio, min_i, min_j, max_ratio, max_i, max_j, count).
    """
    cdef Py_ssize_t B = sources.shape[0]
    cdef Py_ssize_t N = H.shape[0]
    cdef Py_ssize_t Q = H.shape[1]
    cdef Py_ssize_t b, j, c, i
    cdef double d, s, diff, ratio
    cdef double rmin = INFINITY, rmax = -INFINITY
    cdef Py_ssize_t imin = -1, jmin = -1, imax = -1, jmax = -1
    cdef long long count = 0
    with nogil:
        for b in range(B):
            i = sources[b]
            for j in range(i + 1, N):
                d = dist[b, j]
                if d < separation:
                    continue
                s = 0.0
                for c in range(Q):
                    diff = H[i, c] - H[j, c]
                    s += diff * diff
                ratio = sqrt(s) / d
                count += 1
                if ratio < rmin:
                    rmin = ratio
                    imin = i
                    jmin = j
                if ratio > rmax:
                    rmax = ratio
                    imax = i
                    jmax = j
    return rmin, imin, jmin, rmax, imax, jmax, count
