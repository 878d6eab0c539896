# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled energy/gradient kernel for per-vertex affine template fitting.

Hot inner loop of the quasi-Newton solve; see ``_kernels_py.py`` for the
reference implementation and the docstring of the shared signature.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def energy_grad(
    cnp.ndarray[cnp.float64_t, ndim=2] A,
    cnp.ndarray[cnp.float64_t, ndim=2] P,
    cnp.ndarray[cnp.float64_t, ndim=2] corr,
    cnp.ndarray[cnp.float64_t, ndim=1] wa,
    cnp.ndarray[cnp.intp_t, ndim=2] edges,
    double beta,
    cnp.ndarray[cnp.intp_t, ndim=1] lm_idx,
    cnp.ndarray[cnp.float64_t, ndim=2] lm_target,
    double gamma,
):
    cdef Py_ssize_t n = P.shape[0]
    cdef Py_ssize_t n_edges = edges.shape[0]
    cdef Py_ssize_t n_lm = lm_idx.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] x = np.empty((n, 3), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] grad = np.zeros((n, 12), dtype=np.float64)
    cdef Py_ssize_t i, j, k, r, c
    cdef double e_data = 0.0, e_smooth = 0.0, e_lm = 0.0
    cdef double rx, ry, rz, cw, d

    for i in range(n):
        for r in range(3):
            x[i, r] = (A[i, 4 * r] * P[i, 0] + A[i, 4 * r + 1] * P[i, 1]
                       + A[i, 4 * r + 2] * P[i, 2] + A[i, 4 * r + 3])

    # data term
    for i in range(n):
        if wa[i] == 0.0:
            continue
        rx = x[i, 0] - corr[i, 0]
        ry = x[i, 1] - corr[i, 1]
        rz = x[i, 2] - corr[i, 2]
        e_data += wa[i] * (rx * rx + ry * ry + rz * rz)
        cw = 2.0 * wa[i]
        grad[i, 0] += cw * rx * P[i, 0]
        grad[i, 1] += cw * rx * P[i, 1]
        grad[i, 2] += cw * rx * P[i, 2]
        grad[i, 3] += cw * rx
        grad[i, 4] += cw * ry * P[i, 0]
        grad[i, 5] += cw * ry * P[i, 1]
        grad[i, 6] += cw * ry * P[i, 2]
        grad[i, 7] += cw * ry
        grad[i, 8] += cw * rz * P[i, 0]
        grad[i, 9] += cw * rz * P[i, 1]
        grad[i, 10] += cw * rz * P[i, 2]
        grad[i, 11] += cw * rz

    # smoothness term
    if beta != 0.0:
        for k in range(n_edges):
            i = edges[k, 0]
            j = edges[k, 1]
            for c in range(12):
                d = A[i, c] - A[j, c]
                e_smooth += d * d
                grad[i, c] += 2.0 * beta * d
                grad[j, c] -= 2.0 * beta * d

    # landmark term
    if gamma != 0.0:
        for k in range(n_lm):
            i = lm_idx[k]
            rx = x[i, 0] - lm_target[k, 0]
            ry = x[i, 1] - lm_target[k, 1]
            rz = x[i, 2] - lm_target[k, 2]
            e_lm += rx * rx + ry * ry + rz * rz
            cw = 2.0 * gamma
            grad[i, 0] += cw * rx * P[i, 0]
            grad[i, 1] += cw * rx * P[i, 1]
            grad[i, 2] += cw * rx * P[i, 2]
            grad[i, 3] += cw * rx
            grad[i, 4] += cw * ry * P[i, 0]
            grad[i, 5] += cw * ry * P[i, 1]
            grad[i, 6] += cw * ry * P[i, 2]
            grad[i, 7] += cw * ry
            grad[i, 8] += cw * rz * P[i, 0]
            grad[i, 9] += cw * rz * P[i, 1]
            grad[i, 10] += cw * rz * P[i, 2]
            grad[i, 11] += cw * rz

    return e_data + beta * e_smooth + gamma * e_lm, grad
