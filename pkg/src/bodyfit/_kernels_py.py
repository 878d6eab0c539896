"""Pure-numpy energy/gradient kernel for per-vertex affine template fitting.

Twin of the compiled extension in ``_kernels.pyx``; same signature, same math.
Selection happens in :mod:`bodyfit.nrd`.
"""

import numpy as np

BACKEND = "python"


def energy_grad(A, P, corr, wa, edges, beta, lm_idx, lm_target, gamma):
    """Energy and gradient of the combined data/smoothness/landmark objective.

    A         (N, 12) row-major 3x4 affine per vertex
    P         (N, 3)  original template positions
    corr      (N, 3)  fixed correspondence targets
    wa        (N,)    data weight per vertex (compatibility gate x alpha)
    edges     (E, 2)  unique undirected template edges
    beta      smoothness weight
    lm_idx    (L,)    template vertex index per landmark
    lm_target (L, 3)  landmark positions on the scan
    gamma     landmark weight

    Returns (E, grad) with grad shaped (N, 12).
    """
    n = len(P)
    A3 = A.reshape(n, 3, 4)
    x = np.einsum("nij,nj->ni", A3[:, :, :3], P) + A3[:, :, 3]
    grad = np.zeros((n, 3, 4))

    rd = x - corr
    e_data = float(np.dot(wa, np.einsum("ni,ni->n", rd, rd)))
    c = (2.0 * wa)[:, None] * rd
    grad[:, :, :3] += c[:, :, None] * P[:, None, :]
    grad[:, :, 3] += c

    e_smooth = 0.0
    if len(edges) and beta != 0.0:
        d = A[edges[:, 0]] - A[edges[:, 1]]
        e_smooth = float(np.einsum("ei,ei->", d, d))
        gflat = grad.reshape(n, 12)
        np.add.at(gflat, edges[:, 0], 2.0 * beta * d)
        np.add.at(gflat, edges[:, 1], -2.0 * beta * d)

    e_lm = 0.0
    if len(lm_idx) and gamma != 0.0:
        rl = x[lm_idx] - lm_target
        e_lm = float(np.einsum("li,li->", rl, rl))
        cl = 2.0 * gamma * rl
        np.add.at(grad, lm_idx, cl[:, :, None] * np.concatenate(
            [P[lm_idx], np.ones((len(lm_idx), 1))], axis=1)[:, None, :])

    e = e_data + beta * e_smooth + gamma * e_lm
    return e, grad.reshape(n, 12)
