"""Numpy implementations of the variation recursions.

Layout: ``J[p, l, k]`` is ``d X(t_l) / d dW_k`` for path ``p``; ``S[p, l, a, b]``
is the second derivative. Stencil arrays are padded to a common width ``Q``
with zero coefficients.
"""

import numpy as np


def propagate_first(A, idx, src):
    """First variation of a scalar Euler recursion.

    ``J[l + 1, k] = J[l, k] + sum_q A[l, q] J[idx[l, q], k]`` for ``k < l``
    and ``J[l + 1, l] = src[l]``.
    """
    P, n, Q = A.shape
    J = np.zeros((P, n + 1, n))
    for l in range(n):
        if l:
            acc = J[:, l, :l].copy()
            for q in range(Q):
                a = A[:, l, q]
                if a.any():
                    acc += a[:, None] * J[:, idx[l, q], :l]
            J[:, l + 1, :l] = acc
        J[:, l + 1, l] = src[:, l]
    return J


def propagate_second(A, idx, B, C, J):
    """Second variation; ``B`` holds d sigma / d x and ``C`` the local second partials."""
    P, n, Q = A.shape
    S = np.zeros((P, n + 1, n, n))
    for l in range(1, n):
        Js = J[:, idx[l], :l]
        acc = S[:, l, :l, :l].copy()
        for q in range(Q):
            a = A[:, l, q]
            if a.any():
                acc += a[:, None, None] * S[:, idx[l, q], :l, :l]
        acc += np.einsum("pqr,pqa,prb->pab", C[:, l], Js, Js)
        S[:, l + 1, :l, :l] = acc
        cross = np.einsum("pq,pqa->pa", B[:, l], Js)
        S[:, l + 1, :l, l] = cross
        S[:, l + 1, l, :l] = cross
    return S
