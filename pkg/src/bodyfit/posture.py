"""Posture normalization of registered meshes.

Two methods: differential-coordinate transfer anchored at the reference
posture ("wsx"), and skeleton-driven unposing followed by a Laplacian
cleanup ("nh"). Both run after registration and before shape-space learning.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .align import procrustes
from .geom import build_laplacian
from .skeleton import (Pose, Skeleton, SkinningWeights, exp_rotation,
                       global_joint_transforms, log_rotation, skin)


class NormalizationError(ValueError):
    pass


@dataclass
class NormalizationConfig:
    method: str = "nh"  # "wsx" | "nh"
    anchor_count: int = 10
    anchor_weight: float = 1e-3
    sweeps: int = 3


def root_anchors(skinning: SkinningWeights, skeleton: Skeleton, count=10):
    """Vertices most firmly attached to the root joint (torso); they pin the
    global position of the wsx solve without constraining limb shape."""
    col = skinning.to_dense()[:, skeleton.root]
    return np.argsort(-col)[:count]


def normalize_wsx(vertices, mean_vertices, faces, anchors, anchor_weight=1e-3):
    """Shape transfer anchored at the reference posture.

    Minimizes the mismatch between the result's one-ring differential
    coordinates and the input's, with the anchor vertices softly tied to the
    reference positions (weight ``anchor_weight`` relative to the unit
    differential term). The anchors fix the global translation left free by
    the differential coordinates without distorting shape.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    mean_vertices = np.asarray(mean_vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.intp)
    anchors = np.asarray(anchors, dtype=np.intp)
    if anchors.size == 0:
        raise NormalizationError("empty anchor set")
    n = len(vertices)
    L = build_laplacian(faces, n)
    S = sparse.coo_matrix((np.ones(len(anchors)),
                           (np.arange(len(anchors)), anchors)),
                          shape=(len(anchors), n)).tocsr()
    A = (L.T @ L + anchor_weight * (S.T @ S)).tocsc()
    # solve for the displacement from the input; the differential term of the
    # right-hand side cancels exactly, which keeps the poorly conditioned
    # normal equations from amplifying rounding noise (a mesh already at the
    # reference stays put to machine precision)
    rhs = anchor_weight * (S.T @ (mean_vertices[anchors] - vertices[anchors]))
    return vertices + splu(A).solve(rhs)


def wsx_residual(vertices, mesh_vertices, faces):
    """Objective of the wsx solve (without the anchor term): squared mismatch
    between ``vertices``' differential coordinates and the input mesh's."""
    vertices = np.asarray(vertices, dtype=np.float64)
    mesh_vertices = np.asarray(mesh_vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.intp)
    L = build_laplacian(faces, len(mesh_vertices))
    return float(((L @ vertices - L @ mesh_vertices) ** 2).sum())


def estimate_pose(vertices, ref_vertices, skeleton: Skeleton,
                  skinning: SkinningWeights, sweeps=3) -> Pose:
    """Hierarchical pose estimation against a reference in canonical posture.

    Each joint that owns vertices (by dominant skinning weight) gets a Kabsch
    rotation aligning the current prediction of its part to the mesh, swept
    root-to-leaves. Raises when a joint's rotation step exceeds 90 degrees
    twice (the estimate is diverging).
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    ref = np.asarray(ref_vertices, dtype=np.float64)
    nj = len(skeleton.joints)
    jp = skeleton.joint_positions(ref)
    dom = np.asarray(skinning.to_dense()).argmax(axis=1)
    pose = Pose.rest(nj)
    pose.root_translation = vertices.mean(axis=0) - ref.mean(axis=0)
    bad = np.zeros(nj, dtype=int)
    order = skeleton._topo_order()
    for _ in range(sweeps):
        for i in order:
            part = np.where(dom == i)[0]
            if len(part) < 3:
                continue
            pred = skin(ref, skeleton, skinning, pose, joint_positions=jp)
            dR = procrustes(pred[part], vertices[part], with_scale=False).rotation
            ang = np.arccos(np.clip((np.trace(dR) - 1) / 2, -1.0, 1.0))
            if ang > np.pi / 2:
                bad[i] += 1
                if bad[i] >= 2:
                    raise NormalizationError(
                        "pose estimation diverged at joint "
                        f"'{skeleton.joints[i].name}'")
                continue
            Rs, _ = global_joint_transforms(skeleton, jp, pose)
            parent = skeleton.joints[i].parent
            Rgp = Rs[parent] if parent is not None else np.eye(3)
            Rl = (Rgp.T @ dR @ Rgp) @ exp_rotation(pose.rotations[i])
            pose.rotations[i] = log_rotation(Rl)
            if parent is None:
                pred = skin(ref, skeleton, skinning, pose, joint_positions=jp)
                pose.root_translation = pose.root_translation + (
                    vertices[part].mean(axis=0) - pred[part].mean(axis=0))
    return pose


def _nh_once(vertices, faces, skeleton, skinning, ref_vertices, W, sweeps,
             refine_iters):
    ref = np.asarray(ref_vertices, dtype=np.float64)
    rest, M = vertices, None
    for _ in range(max(1, refine_iters)):
        pose = estimate_pose(vertices, ref, skeleton, skinning, sweeps=sweeps)
        jp = skeleton.joint_positions(ref)
        Rs, ts = global_joint_transforms(skeleton, jp, pose)
        M = np.einsum("nj,jab->nab", W, Rs)
        t = W @ ts
        rest = np.linalg.solve(M, (vertices - t)[..., None])[..., 0]
        ref = rest
    # rotation factor of each blended transform carries the input's
    # differential coordinates into the canonical frame
    U, _, Vt = np.linalg.svd(M)
    flip = np.linalg.det(U @ Vt) < 0
    if flip.any():
        Vt[flip, -1] *= -1.0
    R = U @ Vt
    n = len(vertices)
    L = build_laplacian(faces, n)
    delta = np.einsum("nba,nb->na", R, L @ vertices)  # R^T delta
    A = (sparse.identity(n) + L.T @ L).tocsc()
    return splu(A).solve(rest + L.T @ delta)


def normalize_nh(vertices, faces, skeleton: Skeleton, skinning: SkinningWeights,
                 ref_vertices, canonical_pose: Pose | None = None, sweeps=10,
                 refine_iters=2, fixpoint_tol=0.2, max_fixpoint_iters=5):
    """Skeleton-driven posture normalization.

    Estimates the mesh's pose, applies the inverse of the blended skinning
    transforms to reach the canonical posture, then solves a soft Laplacian
    system (unit data weight on the unposed positions, unit weight on the
    input's differential coordinates rotated into the canonical frame) to
    remove blending artifacts near joints. The pose estimate is refined once
    against the mesh's own unposed geometry, which corrects joint pivots for
    bodies whose proportions differ from the reference; the whole step is
    repeated until the output stops moving (RMS change below ``fixpoint_tol``
    mm), which makes the normalization idempotent.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.intp)
    W = skinning.to_dense()
    out = vertices
    for _ in range(max(1, max_fixpoint_iters)):
        nxt = _nh_once(out, faces, skeleton, skinning, ref_vertices, W,
                       sweeps, refine_iters)
        moved = float(np.sqrt(((nxt - out) ** 2).sum(axis=1).mean()))
        out = nxt
        if moved < fixpoint_tol:
            break
    if canonical_pose is not None:
        out = skin(out, skeleton, skinning, canonical_pose)
    return out
