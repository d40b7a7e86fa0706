# cython: language_level=3
"""Compiled variation recursions; same contracts as ``pdsde._fallback``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def propagate_first(double[:, :, ::1] A, cnp.int64_t[:, ::1] idx, double[:, ::1] src):
    cdef Py_ssize_t P = A.shape[0], n = A.shape[1], Q = A.shape[2]
    out = np.zeros((P, n + 1, n))
    cdef double[:, :, ::1] J = out
    cdef Py_ssize_t p, l, q, k, s
    cdef double a
    with nogil:
        for p in range(P):
            for l in range(n):
                for k in range(l):
                    J[p, l + 1, k] = J[p, l, k]
                for q in range(Q):
                    a = A[p, l, q]
                    if a == 0.0:
                        continue
                    s = idx[l, q]
                    for k in range(l):
                        J[p, l + 1, k] += a * J[p, s, k]
                J[p, l + 1, l] = src[p, l]
    return out


def propagate_second(double[:, :, ::1] A, cnp.int64_t[:, ::1] idx, double[:, :, ::1] B,
                     double[:, :, :, ::1] C, double[:, :, ::1] J):
    cdef Py_ssize_t P = A.shape[0], n = A.shape[1], Q = A.shape[2]
    out = np.zeros((P, n + 1, n, n))
    cdef double[:, :, :, ::1] S = out
    cdef Py_ssize_t p, l, q, r, a_, b_, s, s2
    cdef double a, c, cross, acc
    with nogil:
        for p in range(P):
            for l in range(1, n):
                for a_ in range(l):
                    for b_ in range(a_ + 1):
                        acc = S[p, l, a_, b_]
                        for q in range(Q):
                            a = A[p, l, q]
                            if a != 0.0:
                                acc = acc + a * S[p, idx[l, q], a_, b_]
                            s = idx[l, q]
                            for r in range(Q):
                                c = C[p, l, q, r]
                                if c != 0.0:
                                    s2 = idx[l, r]
                                    acc = acc + c * J[p, s, a_] * J[p, s2, b_]
                        S[p, l + 1, a_, b_] = acc
                        S[p, l + 1, b_, a_] = acc
                    cross = 0.0
                    for q in range(Q):
                        cross = cross + B[p, l, q] * J[p, idx[l, q], a_]
                    S[p, l + 1, a_, l] = cross
                    S[p, l + 1, l, a_] = cross
    return out
