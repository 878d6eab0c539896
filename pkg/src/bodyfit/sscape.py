"""Shape space: PCA over registered vertex coordinates plus a scaling
skeleton with linear blend skinning.

A body is reconstructed in two stages: shape coefficients (in standard
deviation units) produce a personalized mesh at the canonical pose, then
skinning poses it. Fitting to a scan alternates pose and shape steps against
gated nearest-neighbor correspondences.
"""

from __future__ import annotations

import json
import warnings
import zipfile
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import least_squares, lsq_linear

from .align import procrustes
from .geom import (
    CompatibilityPredicate,
    GeometryError,
    Scan,
    TemplateMesh,
    compute_vertex_normals,
    nearest_compatible_batch,
)
from .nrd import FitError, fitting_error
from .skeleton import Pose, Skeleton, SkinningWeights, compute_skinning_weights, fit_skeleton, skin


@dataclass(frozen=True)
class ShapeParams:
    """PCA coefficients in sigma-scaled units (+-3 spans the usual range)."""

    coefficients: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coefficients, dtype=np.float64)
        if not np.isfinite(c).all():
            raise ValueError("non-finite shape coefficients")
        object.__setattr__(self, "coefficients", c)

    @classmethod
    def zeros(cls, k):
        return cls(np.zeros(k))


@dataclass
class ShapeSpace:
    mean_vertices: np.ndarray  # (N, 3) mm
    basis: np.ndarray  # (3N, K), orthonormal columns
    variances: np.ndarray  # (K,) mm^2, non-increasing
    template: TemplateMesh  # topology / landmarks / masks reference
    skeleton: Skeleton
    skinning: SkinningWeights
    provenance: dict | None = None

    def __post_init__(self):
        self.mean_vertices = np.asarray(self.mean_vertices, dtype=np.float64)
        self.basis = np.asarray(self.basis, dtype=np.float64)
        self.variances = np.asarray(self.variances, dtype=np.float64)
        k = self.basis.shape[1]
        if self.variances.shape != (k,):
            raise ValueError("variances/basis mismatch")
        if (self.variances < -1e-9).any() or (np.diff(self.variances) > 1e-9).any():
            raise ValueError("variances must be nonnegative and non-increasing")
        gram = self.basis.T @ self.basis
        if k and np.abs(gram - np.eye(k)).max() > 1e-8:
            raise ValueError("basis columns must be orthonormal")

    @property
    def n_components(self):
        return self.basis.shape[1]

    @property
    def n_vertices(self):
        return len(self.mean_vertices)

    def personalized(self, shape: ShapeParams):
        """Mean plus sigma-scaled basis displacement, at the canonical pose."""
        k = min(len(shape.coefficients), self.n_components)
        disp = self.basis[:, :k] @ (shape.coefficients[:k] * np.sqrt(self.variances[:k]))
        return self.mean_vertices + disp.reshape(-1, 3)

    def rest_pose(self):
        return Pose.rest(len(self.skeleton.joints))


def generalized_procrustes(meshes, tol=1e-6, max_rounds=20):
    """Rigidly co-aligns meshes to their evolving mean (no scaling)."""
    aligned = [np.asarray(m, dtype=np.float64).copy() for m in meshes]
    mean = np.mean(aligned, axis=0)
    for _ in range(max_rounds):
        for i, m in enumerate(aligned):
            tf = procrustes(m, mean, with_scale=False)
            aligned[i] = tf.apply(m)
        new_mean = np.mean(aligned, axis=0)
        move = np.linalg.norm(new_mean - mean, axis=1).mean()
        mean = new_mean
        if move < tol:
            break
    return aligned, mean


def pca_decompose(aligned, mean, n_components):
    """Principal displacement directions of co-aligned meshes about ``mean``.

    Gram-matrix eigendecomposition (sample count is far below 3N); returns
    an orthonormal (3N, K) basis and the per-component variances (mm^2),
    dropping numerically null directions.
    """
    n_samples = len(aligned)
    X = np.stack([np.asarray(a, dtype=np.float64).reshape(-1) for a in aligned])
    C = X - np.asarray(mean, dtype=np.float64).reshape(-1)
    gram = C @ C.T / (n_samples - 1)
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    keep = min(n_components, int((evals > max(evals[0], 0) * 1e-12).sum()))
    evals, evecs = evals[:keep], evecs[:, :keep]
    basis = C.T @ evecs / np.sqrt((n_samples - 1) * evals)
    return basis, evals


def learn(registered_meshes, n_components, template: TemplateMesh, joint_schema,
          pre_aligned=False) -> ShapeSpace:
    """PCA shape space from registered meshes sharing the template topology.

    Uses the Gram-matrix eigendecomposition (sample count is far below 3N).
    The skeleton and skinning weights are computed on the mean shape.
    """
    meshes = [np.asarray(m, dtype=np.float64) for m in registered_meshes]
    if len(meshes) < 2:
        raise ValueError("need at least 2 meshes to learn a shape space")
    n = template.n_vertices
    for m in meshes:
        if m.shape != (n, 3):
            raise GeometryError("mesh does not share the template topology")
    if pre_aligned:
        aligned, mean = meshes, np.mean(meshes, axis=0)
    else:
        aligned, mean = generalized_procrustes(meshes)
    n_samples = len(aligned)
    k_max = n_samples - 1
    if n_components > k_max:
        warnings.warn(f"clamping component count {n_components} -> {k_max}")
        n_components = k_max
    basis, evals = pca_decompose(aligned, mean, n_components)

    skeleton = fit_skeleton(mean, joint_schema)
    skinning = compute_skinning_weights(mean, skeleton, faces=template.faces)
    return ShapeSpace(
        mean_vertices=mean,
        basis=basis,
        variances=evals,
        template=template,
        skeleton=skeleton,
        skinning=skinning,
        provenance={"n_samples": n_samples},
    )


def reconstruct(space: ShapeSpace, shape: ShapeParams, pose: Pose):
    """Vertices of the body with the given shape coefficients and pose."""
    pers = space.personalized(shape)
    return skin(pers, space.skeleton, space.skinning, pose)


# ---------------------------------------------------------------------------
# fitting the space to scans


def _matched_landmarks(space: ShapeSpace, scan: Scan):
    t = space.template
    vidx, pos = [], []
    for name, vi in zip(t.landmark_names, t.landmark_indices):
        if name in scan.landmarks:
            vidx.append(int(vi))
            pos.append(scan.landmarks[name])
    return np.asarray(vidx, dtype=np.intp), np.asarray(pos, dtype=np.float64).reshape(-1, 3)


def _active_joints(skeleton):
    """Joints whose rotation influences the surface (owners of bone segments)."""
    owners = sorted({j.parent for j in skeleton.joints if j.parent is not None})
    return np.asarray(owners, dtype=np.intp)


def _pose_from_params(x, n_joints, active):
    rot = np.zeros((n_joints, 3))
    rot[active] = x[3:].reshape(len(active), 3)
    return Pose(rotations=rot, root_translation=x[:3])


def _pose_params(pose, active):
    return np.concatenate([pose.root_translation, pose.rotations[active].ravel()])


def _fit_pose_to_landmarks(space, shape, scan, max_nfev=200):
    """Stage 1: shape fixed, pose minimizes the landmark distances."""
    vidx, targets = _matched_landmarks(space, scan)
    if len(vidx) < 3:
        raise FitError("scan has fewer than 3 landmarks matching the template schema")
    pers = space.personalized(shape)
    jp = space.skeleton.joint_positions(pers)
    nj = len(space.skeleton.joints)
    active = _active_joints(space.skeleton)

    def resid(x):
        pose = _pose_from_params(x, nj, active)
        posed = skin(pers, space.skeleton, space.skinning, pose, joint_positions=jp)
        return (posed[vidx] - targets).ravel()

    x0 = _pose_params(Pose.rest(nj), active)
    res = least_squares(resid, x0, method="lm", max_nfev=max_nfev)
    pose = _pose_from_params(res.x, nj, active)
    mean_err = float(np.linalg.norm(resid(res.x).reshape(-1, 3), axis=1).mean())
    if mean_err > 300.0:
        raise FitError(f"posture initialization failed: landmark misfit {mean_err:.1f} mm")
    return pose, mean_err


def _correspondences(space, verts, scan, compat):
    nrm = compute_vertex_normals(verts, space.template.faces)
    regions = space.template.region_of_vertices()
    dist_thr, cos_thr = compat.thresholds_for(regions)
    idx, w = nearest_compatible_batch(verts, nrm, scan, dist_thr, cos_thr)
    return idx, w


def _data_energy(verts, scan, idx, w):
    r = verts - scan.points[idx]
    return float(np.dot(w, np.einsum("ni,ni->n", r, r)))


# Weight of the point-to-point rows blended into the point-to-plane data
# steps.  Pure point-to-plane leaves tangential motion free, letting pose
# compensate shape (e.g. shoulder rotation vs. arm length); a small
# point-to-point component pins those directions without reintroducing the
# contraction bias of a pure nearest-point objective.
_TANGENT_WEIGHT = 0.1

# Weak pull of the pose parameters toward their value at the start of each
# step.  Joints whose vertices all fail the compatibility gate (e.g. on a
# partial scan) would otherwise be unconstrained and drift arbitrarily; the
# landmark stage already placed them well.
_POSE_PRIOR = 1.0


def _pose_step(space, pers, jp, pose, scan, idx, w, max_nfev=60):
    """Data step over pose.

    Residuals are point-to-plane (scan normal dotted with the offset), which
    removes the tangential pull of finite sampling density; the gate and the
    reported data energy stay point-to-point.
    """
    sel = w > 0
    targets = scan.points[idx[sel]]
    normals = scan.normals[idx[sel]]
    nj = len(space.skeleton.joints)
    active = _active_joints(space.skeleton)
    x0 = _pose_params(pose, active)

    def resid(x):
        posed = skin(pers, space.skeleton, space.skinning,
                     _pose_from_params(x, nj, active), joint_positions=jp)
        r = posed[sel] - targets
        return np.concatenate(
            [np.einsum("ni,ni->n", r, normals),
             _TANGENT_WEIGHT * r.ravel(),
             _POSE_PRIOR * (x - x0)]
        )

    res = least_squares(resid, x0, method="trf", max_nfev=max_nfev)
    return _pose_from_params(res.x, nj, active)


def _shape_design(space, pose, max_k):
    """Posed vertices are affine in the sigma-scaled coefficients; returns
    (base, J) with verts(phi) = base + J phi."""
    base = reconstruct(space, ShapeParams.zeros(max_k), pose).ravel()
    J = np.empty((len(base), max_k))
    for k in range(max_k):
        e = np.zeros(max_k)
        e[k] = 1.0
        J[:, k] = reconstruct(space, ShapeParams(e), pose).ravel() - base
    return base, J


def _plane_rows(J, base, scan, idx, w, max_k):
    """Design rows for the shape step: point-to-plane residuals plus a
    down-weighted point-to-point component anchoring tangential directions."""
    sel = w > 0
    normals = scan.normals[idx[sel]]
    Jv = J.reshape(-1, 3, max_k)[sel]
    diff = scan.points[idx[sel]] - base.reshape(-1, 3)[sel]
    A_plane = np.einsum("ni,nik->nk", normals, Jv)
    b_plane = np.einsum("ni,ni->n", normals, diff)
    A_pt = _TANGENT_WEIGHT * Jv.reshape(-1, max_k)
    b_pt = _TANGENT_WEIGHT * diff.ravel()
    return np.vstack([A_plane, A_pt]), np.concatenate([b_plane, b_pt])


def _shape_step(space, pose, scan, idx, w, max_k, bound=3.0):
    """Box-bounded linear least squares over the sigma-scaled coefficients.

    Posed vertices are affine in the coefficients; see _plane_rows for the
    residual construction.
    """
    base, J = _shape_design(space, pose, max_k)
    A, bvec = _plane_rows(J, base, scan, idx, w, max_k)
    res = lsq_linear(A, bvec, bounds=(-bound, bound))
    return ShapeParams(res.x)


def fit_to_scan(space: ShapeSpace, scan: Scan, max_k=None,
                compat: CompatibilityPredicate | None = None,
                tol=1e-4, max_alternations=50):
    """Two-stage fit: landmark-only pose, then alternating pose/shape steps
    on the gated data term, recomputing correspondences after every step."""
    if max_k is None:
        max_k = space.n_components
    max_k = min(max_k, space.n_components)
    compat = compat or CompatibilityPredicate()

    shape = ShapeParams.zeros(max_k)
    pose, _ = _fit_pose_to_landmarks(space, shape, scan)

    if len(scan) == 0:
        raise FitError("no compatible points: scan has no surface samples")

    prev_ed = None
    for _ in range(max_alternations):
        pers = space.personalized(shape)
        jp = space.skeleton.joint_positions(pers)
        verts = skin(pers, space.skeleton, space.skinning, pose, joint_positions=jp)
        idx, w = _correspondences(space, verts, scan, compat)
        if w.sum() == 0:
            raise FitError("no compatible points")
        pose = _pose_step(space, pers, jp, pose, scan, idx, w)

        verts = skin(pers, space.skeleton, space.skinning, pose, joint_positions=jp)
        idx, w = _correspondences(space, verts, scan, compat)
        if w.sum() == 0:
            raise FitError("no compatible points")
        shape = _shape_step(space, pose, scan, idx, w, max_k)

        verts = reconstruct(space, shape, pose)
        idx, w = _correspondences(space, verts, scan, compat)
        ed = _data_energy(verts, scan, idx, w)
        if prev_ed is not None and abs(prev_ed - ed) <= tol * max(prev_ed, 1e-12):
            break
        prev_ed = ed

    verts = reconstruct(space, shape, pose)
    err, summary = fitting_error(verts, space.template.faces, scan)
    from .nrd import FitResult

    return shape, pose, FitResult(
        deformed_vertices=verts, per_vertex_error=err, summary=summary, energy_trace=[]
    )


def fit_to_partial_scans(space: ShapeSpace, scans, max_k=None,
                         compat: CompatibilityPredicate | None = None,
                         tol=1e-4, max_alternations=50):
    """One shared shape over several partial scans, one pose per scan.

    Each scan is first fitted independently for initialization; then the
    shape step minimizes the summed data terms while pose steps stay
    per-scan.
    """
    if not scans:
        raise FitError("empty scan list")
    if max_k is None:
        max_k = space.n_components
    max_k = min(max_k, space.n_components)
    compat = compat or CompatibilityPredicate()

    inits = [fit_to_scan(space, s, max_k=max_k, compat=compat,
                         max_alternations=max_alternations) for s in scans]
    if len(scans) == 1:
        return inits[0][0], [inits[0][1]], [inits[0][2]]
    poses = [p for _, p, _ in inits]
    shape = ShapeParams(np.mean([s.coefficients for s, _, _ in inits], axis=0))

    prev_ed = None
    for _ in range(max_alternations):
        pers = space.personalized(shape)
        jp = space.skeleton.joint_positions(pers)
        corr = []
        for i, scan in enumerate(scans):
            verts = skin(pers, space.skeleton, space.skinning, poses[i], joint_positions=jp)
            idx, w = _correspondences(space, verts, scan, compat)
            if w.sum() > 0:
                poses[i] = _pose_step(space, pers, jp, poses[i], scan, idx, w)

        rows_A, rows_b = [], []
        for i, scan in enumerate(scans):
            verts = skin(pers, space.skeleton, space.skinning, poses[i], joint_positions=jp)
            idx, w = _correspondences(space, verts, scan, compat)
            corr.append((idx, w))
            base, J = _shape_design(space, poses[i], max_k)
            Ai, bi = _plane_rows(J, base, scan, idx, w, max_k)
            rows_A.append(Ai)
            rows_b.append(bi)
        A = np.vstack(rows_A)
        if len(A) == 0:
            raise FitError("no compatible points across scans")
        res = lsq_linear(A, np.concatenate(rows_b), bounds=(-3.0, 3.0))
        shape = ShapeParams(res.x)

        ed = 0.0
        for i, scan in enumerate(scans):
            verts = reconstruct(space, shape, poses[i])
            idx, w = _correspondences(space, verts, scan, compat)
            ed += _data_energy(verts, scan, idx, w)
        if prev_ed is not None and abs(prev_ed - ed) <= tol * max(prev_ed, 1e-12):
            break
        prev_ed = ed

    from .nrd import FitResult

    results = []
    for i, scan in enumerate(scans):
        verts = reconstruct(space, shape, poses[i])
        err, summary = fitting_error(verts, space.template.faces, scan)
        results.append(FitResult(deformed_vertices=verts, per_vertex_error=err,
                                 summary=summary, energy_trace=[]))
    return shape, poses, results


# ---------------------------------------------------------------------------
# archive format: zip with a JSON header and little-endian float64 blocks


def save_space(path, space: ShapeSpace):
    t = space.template
    header = {
        "n_vertices": space.n_vertices,
        "n_components": space.n_components,
        "units": "mm",
        "joint_schema": json.loads(space.skeleton.to_json()),
        "skinning": "inverse-distance to two nearest bone segments, smoothed",
        "landmark_names": t.landmark_names,
        "landmark_indices": t.landmark_indices.tolist(),
        "region_masks": {k: np.flatnonzero(v).tolist() for k, v in t.region_masks.items()},
        "provenance": space.provenance or {},
    }
    blocks = {
        "mean.f64": space.mean_vertices.astype("<f8").tobytes(),
        "basis.f64": space.basis.astype("<f8").tobytes(),
        "variances.f64": space.variances.astype("<f8").tobytes(),
        "skinning.f64": space.skinning.to_dense().astype("<f8").tobytes(),
        "faces.i32": t.faces.astype("<i4").tobytes(),
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as z:
        # fixed timestamps keep the archive byte-reproducible
        info = zipfile.ZipInfo("header.json", date_time=(1980, 1, 1, 0, 0, 0))
        z.writestr(info, json.dumps(header, sort_keys=True))
        for name, data in sorted(blocks.items()):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            z.writestr(info, data)


def load_space(path) -> ShapeSpace:
    with zipfile.ZipFile(path) as z:
        header = json.loads(z.read("header.json"))
        n = header["n_vertices"]
        k = header["n_components"]
        mean = np.frombuffer(z.read("mean.f64"), dtype="<f8").reshape(n, 3)
        basis = np.frombuffer(z.read("basis.f64"), dtype="<f8").reshape(3 * n, k)
        variances = np.frombuffer(z.read("variances.f64"), dtype="<f8")
        faces = np.frombuffer(z.read("faces.i32"), dtype="<i4").reshape(-1, 3).astype(np.intp)
        skin_w = np.frombuffer(z.read("skinning.f64"), dtype="<f8").reshape(n, -1)
    masks = {}
    for name, idx in header["region_masks"].items():
        m = np.zeros(n, dtype=bool)
        m[np.asarray(idx, dtype=np.intp)] = True
        masks[name] = m
    template = TemplateMesh(
        vertices=mean.copy(),
        faces=faces,
        landmark_names=header["landmark_names"],
        landmark_indices=np.asarray(header["landmark_indices"], dtype=np.intp),
        region_masks=masks,
    )
    skeleton = Skeleton.from_json(json.dumps(header["joint_schema"]))
    return ShapeSpace(
        mean_vertices=mean,
        basis=basis,
        variances=variances,
        template=template,
        skeleton=skeleton,
        skinning=SkinningWeights(matrix=sparse.csr_matrix(skin_w)),
        provenance=header.get("provenance"),
    )
