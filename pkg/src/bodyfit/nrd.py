"""Non-rigid template fitting with one 3x4 affine transform per vertex.

The objective combines a gated nearest-neighbor data term, an edge-wise
smoothness term on neighboring transforms, and a landmark term. The outer
loop anneals the smoothness/landmark weights while re-computing
correspondences; each inner solve is a bounded quasi-Newton minimization on
the fixed-correspondence energy.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .geom import (
    CompatibilityPredicate,
    GeometryError,
    Scan,
    TemplateMesh,
    compute_vertex_normals,
    nearest_compatible_batch,
)

if os.environ.get("BODYFIT_PURE_PYTHON"):
    from . import _kernels_py as _kernels
else:
    try:
        from . import _kernels  # compiled extension
    except ImportError:
        from . import _kernels_py as _kernels

KERNEL_BACKEND = _kernels.BACKEND


class FitError(RuntimeError):
    pass


@dataclass
class AffineField:
    """One 3x4 affine matrix per template vertex, acting on [p; 1]."""

    transforms: np.ndarray  # (N, 3, 4)

    def __post_init__(self):
        t = np.ascontiguousarray(self.transforms, dtype=np.float64)
        if t.ndim != 3 or t.shape[1:] != (3, 4):
            raise GeometryError("transforms must be (N, 3, 4)")
        if not np.isfinite(t).all():
            raise GeometryError("non-finite affine entries")
        self.transforms = t

    @classmethod
    def identity(cls, n):
        t = np.zeros((n, 3, 4))
        t[:, :, :3] = np.eye(3)
        return cls(t)

    @classmethod
    def from_initial_vertices(cls, template_vertices, initial_vertices):
        """Identity linear part, translation carrying p_i to the initial vertex."""
        f = cls.identity(len(template_vertices))
        f.transforms[:, :, 3] = np.asarray(initial_vertices) - template_vertices
        return f

    def apply(self, points):
        pts = np.asarray(points)
        return (
            np.einsum("nij,nj->ni", self.transforms[:, :, :3], pts)
            + self.transforms[:, :, 3]
        )


@dataclass(frozen=True)
class NrdWeights:
    alpha: float = 1.0
    beta: float = 1e6
    gamma: float = 1e-3
    relax_factor: float = 0.25
    beta_floor: float = 1e3

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("weights must be nonnegative")
        if not (0 < self.relax_factor < 1):
            raise ValueError("relax_factor must be in (0, 1)")
        if self.beta_floor <= 0:
            raise ValueError("beta_floor must be positive")


@dataclass(frozen=True)
class NrdConfig:
    weights: NrdWeights = field(default_factory=NrdWeights)
    compat: CompatibilityPredicate = field(default_factory=CompatibilityPredicate)
    frozen_regions: tuple[str, ...] = ()
    inner_tol: float = 1e-6
    inner_max_iter: int = 200


@dataclass
class FitResult:
    deformed_vertices: np.ndarray  # (N, 3)
    per_vertex_error: np.ndarray  # (N,) mm, NaN where invalid
    summary: dict
    energy_trace: list  # one entry per outer iteration: (alpha, beta, gamma, E)


def _landmark_arrays(template, scan, frozen_mask=None):
    """Matched (template vertex index, scan position) pairs, frozen ones dropped."""
    names = template.landmark_names
    lm_idx, lm_pos = [], []
    for name, vi in zip(names, template.landmark_indices):
        if name in scan.landmarks:
            if frozen_mask is not None and frozen_mask[vi]:
                continue
            lm_idx.append(vi)
            lm_pos.append(scan.landmarks[name])
    if lm_idx:
        return np.asarray(lm_idx, dtype=np.intp), np.asarray(lm_pos, dtype=np.float64)
    return np.zeros(0, dtype=np.intp), np.zeros((0, 3))


def _frozen_mask(template, frozen_regions):
    mask = np.zeros(template.n_vertices, dtype=bool)
    for name in frozen_regions:
        if name not in template.region_masks:
            raise GeometryError(f"frozen region {name!r} not in template masks")
        mask |= template.region_masks[name]
    return mask


def energy(field, template, scan, corr_idx, corr_w, weights, frozen_mask=None,
           landmarks=None):
    """Combined energy and its analytic gradient at fixed correspondences.

    ``corr_idx``/``corr_w`` come from the compatible nearest-neighbor gate;
    ``landmarks`` is an (indices, positions) pair, defaulting to the labels
    shared between template and scan.
    """
    n = template.n_vertices
    if frozen_mask is None:
        frozen_mask = np.zeros(n, dtype=bool)
    if landmarks is None:
        landmarks = _landmark_arrays(template, scan, frozen_mask)
    lm_idx, lm_pos = landmarks
    wa = weights.alpha * np.asarray(corr_w, dtype=np.float64)
    wa[frozen_mask] = 0.0
    if len(scan.points):
        corr = scan.points[np.asarray(corr_idx, dtype=np.intp)]
    else:
        corr = np.zeros((n, 3))
    e, grad = _kernels.energy_grad(
        np.ascontiguousarray(field.transforms.reshape(n, 12)),
        template.vertices,
        np.ascontiguousarray(corr),
        wa,
        template.edges(),
        weights.beta,
        lm_idx,
        np.ascontiguousarray(lm_pos),
        weights.gamma,
    )
    return e, grad.reshape(n, 3, 4)


def _inner_solve(A, template, corr, wa, lm_idx, lm_pos, beta, gamma, config):
    """L-BFGS-B on the fixed-correspondence energy; returns (A, E_final)."""
    n = template.n_vertices
    P = template.vertices
    edges = template.edges()

    def fun(x):
        e, g = _kernels.energy_grad(
            x.reshape(n, 12), P, corr, wa, edges, beta, lm_idx, lm_pos, gamma
        )
        return e, g.ravel()

    res = minimize(
        fun,
        A.reshape(-1),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": config.inner_max_iter, "ftol": config.inner_tol,
                 "gtol": 1e-12, "maxcor": 20},
    )
    return res.x.reshape(n, 12), float(res.fun)


def fit(template: TemplateMesh, scan: Scan, initial_vertices=None,
        config: NrdConfig | None = None) -> FitResult:
    """Anneal-and-solve loop for the non-rigid fit.

    One smoothness-only pass (data weight zero) brings the surfaces into
    rough correspondence, then data-term iterations run while beta and gamma
    decay by the relax factor, stopping after the iteration at which
    beta <= beta_floor.
    """
    config = config or NrdConfig()
    w = config.weights
    n = template.n_vertices
    P = template.vertices

    if initial_vertices is None:
        A = AffineField.identity(n).transforms.reshape(n, 12)
    else:
        A = AffineField.from_initial_vertices(P, initial_vertices).transforms.reshape(n, 12)

    frozen = _frozen_mask(template, config.frozen_regions)
    lm_idx, lm_pos = _landmark_arrays(template, scan, frozen)
    regions = template.region_of_vertices()
    dist_thr, cos_thr = config.compat.thresholds_for(regions)
    alpha_vec = np.where(frozen, 0.0, 1.0)
    edges_dummy_corr = np.zeros((n, 3))

    trace = []
    beta, gamma = w.beta, w.gamma

    # smoothness-only pass: alpha = 0, landmark term active
    A, e = _inner_solve(A, template, edges_dummy_corr, np.zeros(n), lm_idx, lm_pos,
                        beta, gamma, config)
    trace.append({"alpha": 0.0, "beta": beta, "gamma": gamma, "energy": e})

    first = True
    while True:
        deformed = _apply_flat(A, P)
        nrm = compute_vertex_normals(deformed, template.faces)
        idx, wgate = nearest_compatible_batch(deformed, nrm, scan, dist_thr, cos_thr)
        wa = w.alpha * wgate * alpha_vec
        if first and wa.sum() == 0:
            raise FitError("initialization too far: no compatible points at first data iteration")
        first = False
        corr = scan.points[idx]
        A, e = _inner_solve(A, template, corr, wa, lm_idx, lm_pos, beta, gamma, config)
        trace.append({"alpha": w.alpha, "beta": beta, "gamma": gamma, "energy": e})
        if beta <= w.beta_floor:
            break
        beta *= w.relax_factor
        gamma *= w.relax_factor

    deformed = _apply_flat(A, P)
    err, summary = fitting_error(deformed, template.faces, scan)
    summary["final_beta"] = beta
    summary["outer_iterations"] = len(trace)
    return FitResult(
        deformed_vertices=deformed,
        per_vertex_error=err,
        summary=summary,
        energy_trace=trace,
    )


def _apply_flat(A, P):
    A3 = A.reshape(len(P), 3, 4)
    return np.einsum("nij,nj->ni", A3[:, :, :3], P) + A3[:, :, 3]


def fitting_error(deformed_vertices, faces, scan, max_dist=50.0, max_angle=60.0):
    """Per-vertex nearest-scan-point distance with the validity gate.

    A vertex is valid when its nearest scan point lies within ``max_dist`` and
    the normals deviate by less than ``max_angle``. Returns (per-vertex error
    with NaN at invalid vertices, summary dict including the cumulative
    proportion-below-threshold curve at 1 mm steps 0..50).
    """
    deformed_vertices = np.asarray(deformed_vertices, dtype=np.float64)
    nrm = compute_vertex_normals(deformed_vertices, np.asarray(faces, dtype=np.intp))
    idx, wgate = nearest_compatible_batch(
        deformed_vertices, nrm, scan, max_dist, np.cos(np.radians(max_angle))
    )
    dist = np.linalg.norm(deformed_vertices - scan.points[idx], axis=1)
    valid = wgate > 0
    err = np.where(valid, dist, np.nan)
    thresholds = np.arange(0, 51, dtype=np.float64)
    below = [(valid & (dist <= t)).mean() for t in thresholds]
    summary = {
        "mean_error": float(dist[valid].mean()) if valid.any() else float("nan"),
        "median_error": float(np.median(dist[valid])) if valid.any() else float("nan"),
        "valid_fraction": float(valid.mean()),
        "cumulative_thresholds_mm": thresholds.tolist(),
        "cumulative_proportion_below": [float(b) for b in below],
    }
    return err, summary
