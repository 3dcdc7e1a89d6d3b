# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: incremental-Cholesky greedy MAP and batched small
determinants / adjugates.  Semantics match ``dppselect._fallback`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()


def greedy_map(const double[:, ::1] K, Py_ssize_t k, double eps):
    cdef Py_ssize_t n = K.shape[0]
    cdef Py_ssize_t i, l, j, t = 0
    cdef double s, e, v, dj, best
    cdef bint stopped = False

    cis_arr = np.zeros((n, k), dtype=np.float64)
    di2_arr = np.empty(n, dtype=np.float64)
    sel_arr = np.zeros(n, dtype=np.uint8)
    order_arr = np.empty(k, dtype=np.intp)
    gains_arr = np.empty(k, dtype=np.float64)
    cdef double[:, ::1] cis = cis_arr
    cdef double[::1] di2 = di2_arr
    cdef unsigned char[::1] sel = sel_arr
    cdef Py_ssize_t[::1] order = order_arr
    cdef double[::1] gains = gains_arr

    for i in range(n):
        di2[i] = K[i, i]

    while t < k:
        j = -1
        best = 0.0
        for i in range(n):
            if sel[i]:
                continue
            if j < 0 or di2[i] > best:
                j = i
                best = di2[i]
        if j < 0 or best <= eps:
            stopped = True
            break
        order[t] = j
        gains[t] = best
        sel[j] = 1
        t += 1
        if t == k:
            break
        dj = sqrt(best)
        for i in range(n):
            if sel[i]:
                continue
            s = K[j, i]
            for l in range(t - 1):
                s -= cis[j, l] * cis[i, l]
            e = s / dj
            cis[i, t - 1] = e
            v = di2[i] - e * e
            di2[i] = v if v > 0.0 else 0.0

    return order_arr[:t].copy(), gains_arr[:t].copy(), stopped


cdef double _det_inplace(double* a, Py_ssize_t n) noexcept nogil:
    """LU with partial pivoting on a row-major n x n scratch buffer."""
    cdef Py_ssize_t c, r, p, q
    cdef double det = 1.0, piv, f, tmp
    for c in range(n):
        p = c
        piv = fabs(a[c * n + c])
        for r in range(c + 1, n):
            if fabs(a[r * n + c]) > piv:
                piv = fabs(a[r * n + c])
                p = r
        if piv == 0.0:
            return 0.0
        if p != c:
            for q in range(n):
                tmp = a[c * n + q]
                a[c * n + q] = a[p * n + q]
                a[p * n + q] = tmp
            det = -det
        piv = a[c * n + c]
        det *= piv
        for r in range(c + 1, n):
            f = a[r * n + c] / piv
            if f != 0.0:
                for q in range(c + 1, n):
                    a[r * n + q] -= f * a[c * n + q]
    return det


def subset_dets(const double[:, ::1] L, const Py_ssize_t[:, ::1] subsets):
    cdef Py_ssize_t m = subsets.shape[0], k = subsets.shape[1]
    cdef Py_ssize_t s, r, c
    out_arr = np.empty(m, dtype=np.float64)
    cdef double[::1] out = out_arr
    scratch_arr = np.empty(max(k * k, 1), dtype=np.float64)
    cdef double[::1] a = scratch_arr
    with nogil:
        for s in range(m):
            for r in range(k):
                for c in range(k):
                    a[r * k + c] = L[subsets[s, r], subsets[s, c]]
            out[s] = _det_inplace(&a[0], k)
    return out_arr


def subset_dets_adj(const double[:, ::1] L, const Py_ssize_t[:, ::1] subsets):
    """Determinants and adjugates of every principal submatrix ``L[S, S]``."""
    cdef Py_ssize_t m = subsets.shape[0], k = subsets.shape[1]
    cdef Py_ssize_t s, r, c, i, j, rr, cc, mr, mc
    cdef double sign
    dets_arr = np.empty(m, dtype=np.float64)
    adj_arr = np.empty((m, k, k), dtype=np.float64)
    cdef double[::1] dets = dets_arr
    cdef double[:, :, ::1] adj = adj_arr
    sub_arr = np.empty(max(k * k, 1), dtype=np.float64)
    work_arr = np.empty(max(k * k, 1), dtype=np.float64)
    minor_arr = np.empty(max((k - 1) * (k - 1), 1), dtype=np.float64)
    cdef double[::1] sub = sub_arr
    cdef double[::1] work = work_arr
    cdef double[::1] minor = minor_arr
    with nogil:
        for s in range(m):
            for r in range(k):
                for c in range(k):
                    sub[r * k + c] = L[subsets[s, r], subsets[s, c]]
                    work[r * k + c] = sub[r * k + c]
            dets[s] = _det_inplace(&work[0], k)
            if k == 1:
                adj[s, 0, 0] = 1.0
                continue
            for i in range(k):
                for j in range(k):
                    # cofactor C_ij from the minor without row i, column j
                    mr = 0
                    for rr in range(k):
                        if rr == i:
                            continue
                        mc = 0
                        for cc in range(k):
                            if cc == j:
                                continue
                            minor[mr * (k - 1) + mc] = sub[rr * k + cc]
                            mc += 1
                        mr += 1
                    sign = 1.0 if (i + j) % 2 == 0 else -1.0
                    adj[s, j, i] = sign * _det_inplace(&minor[0], k - 1)
    return dets_arr, adj_arr
