# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, INFINITY

cnp.import_array()


def contrastive_rows(sim, anchor_labels, cand_labels, mask, double tau):
    cdef double[:, ::1] S = np.ascontiguousarray(sim, dtype=np.float64)
    cdef long long[::1] al = np.ascontiguousarray(anchor_labels, dtype=np.int64)
    cdef long long[::1] cl = np.ascontiguousarray(cand_labels, dtype=np.int64)
    cdef unsigned char[:, ::1] mk = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t A = S.shape[0], C = S.shape[1]
    losses_arr = np.zeros(A, dtype=np.float64)
    grad_arr = np.zeros((A, C), dtype=np.float64)
    cdef double[::1] losses = losses_arr
    cdef double[:, ::1] G = grad_arr
    cdef Py_ssize_t i, j
    cdef double m, s, lse, pos_sum, x, k
    cdef long long npos
    for i in range(A):
        npos = 0
        m = -INFINITY
        pos_sum = 0.0
        for j in range(C):
            if mk[i, j]:
                x = S[i, j] / tau
                if x > m:
                    m = x
                if cl[j] == al[i]:
                    npos += 1
                    pos_sum += x
        if npos == 0:
            continue
        s = 0.0
        for j in range(C):
            if mk[i, j]:
                x = exp(S[i, j] / tau - m)
                G[i, j] = x
                s += x
        lse = m + log(s)
        k = <double>npos
        losses[i] = lse - pos_sum / k
        for j in range(C):
            if mk[i, j]:
                x = G[i, j] / s
                if cl[j] == al[i]:
                    x -= 1.0 / k
                G[i, j] = x / tau
    return losses_arr, grad_arr


cdef double _assign(double[:, ::1] Z, double[:, ::1] Cn,
                    long long[::1] labels, double[::1] conf) noexcept nogil:
    cdef Py_ssize_t N = Z.shape[0], M = Cn.shape[0], d = Z.shape[1]
    cdef Py_ssize_t i, m, t
    cdef double best, v, obj = 0.0
    cdef long long arg
    for i in range(N):
        best = -INFINITY
        arg = 0
        for m in range(M):
            v = 0.0
            for t in range(d):
                v += Z[i, t] * Cn[m, t]
            if v > best:
                best = v
                arg = m
        labels[i] = arg
        conf[i] = best
        obj += best
    return obj


cdef void _update(double[:, ::1] Z, long long[::1] labels, double[:, ::1] Cn,
                  double[:, ::1] sums, long long[::1] counts) noexcept nogil:
    cdef Py_ssize_t N = Z.shape[0], M = Cn.shape[0], d = Z.shape[1]
    cdef Py_ssize_t i, m, t
    cdef double n
    for m in range(M):
        counts[m] = 0
        for t in range(d):
            sums[m, t] = 0.0
    for i in range(N):
        m = labels[i]
        counts[m] += 1
        for t in range(d):
            sums[m, t] += Z[i, t]
    for m in range(M):
        if counts[m] == 0:
            continue
        n = 0.0
        for t in range(d):
            n += sums[m, t] * sums[m, t]
        n = sqrt(n)
        if n > 1e-12:
            for t in range(d):
                Cn[m, t] = sums[m, t] / n


def spherical_kmeans(Z, init_centers, Py_ssize_t max_iters, double tol):
    cdef double[:, ::1] Zv = np.ascontiguousarray(Z, dtype=np.float64)
    centers_arr = np.array(init_centers, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] Cn = centers_arr
    cdef Py_ssize_t N = Zv.shape[0], M = Cn.shape[0], d = Zv.shape[1]
    labels_arr = np.zeros(N, dtype=np.int64)
    new_labels_arr = np.zeros(N, dtype=np.int64)
    conf_arr = np.zeros(N, dtype=np.float64)
    cdef long long[::1] labels = labels_arr
    cdef long long[::1] new_labels = new_labels_arr
    cdef double[::1] conf = conf_arr
    cdef double[:, ::1] sums = np.zeros((M, d), dtype=np.float64)
    cdef long long[::1] counts = np.zeros(M, dtype=np.int64)
    cdef double obj, new_obj
    cdef Py_ssize_t it = 0, i
    cdef bint same
    obj = _assign(Zv, Cn, labels, conf)
    trace = [obj]
    while it < max_iters:
        _update(Zv, labels, Cn, sums, counts)
        new_obj = _assign(Zv, Cn, new_labels, conf)
        it += 1
        same = True
        for i in range(N):
            if new_labels[i] != labels[i]:
                same = False
            labels[i] = new_labels[i]
        trace.append(new_obj)
        if same or (new_obj - obj) < tol:
            obj = new_obj
            break
        obj = new_obj
    return labels_arr, conf_arr, centers_arr, np.array(trace), it
