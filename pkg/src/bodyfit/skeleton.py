"""Scaling skeleton and linear blend skinning.

Joint locations are affine combinations of nearby surface vertices (anchor
weights), so the skeleton scales with the body. Posing applies per-joint
exponential-map rotations down the tree and blends the per-joint rigid
transforms with skinning weights.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse


class SkeletonError(ValueError):
    pass


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int | None  # index into the joint list
    anchor_idx: np.ndarray  # template vertex indices
    anchor_w: np.ndarray  # nonnegative, sums to 1


@dataclass
class Skeleton:
    joints: list[Joint]

    def __post_init__(self):
        roots = [i for i, j in enumerate(self.joints) if j.parent is None]
        if len(roots) != 1:
            raise SkeletonError(f"need exactly one root, found {len(roots)}")
        # parent links must form a tree (parents precede children after toposort)
        seen = set()
        for i in self._topo_order():
            seen.add(i)
        if len(seen) != len(self.joints):
            raise SkeletonError("joint parent links contain a cycle")
        for j in self.joints:
            if (np.asarray(j.anchor_w) < 0).any() or abs(j.anchor_w.sum() - 1) > 1e-9:
                raise SkeletonError(f"anchor weights of {j.name} must be nonneg, sum 1")

    def _topo_order(self):
        order, state = [], {}

        def visit(i):
            if state.get(i) == 1:
                raise SkeletonError("cycle in joint tree")
            if state.get(i) == 2:
                return
            state[i] = 1
            p = self.joints[i].parent
            if p is not None:
                visit(p)
            state[i] = 2
            order.append(i)

        for i in range(len(self.joints)):
            visit(i)
        return order

    @property
    def names(self):
        return [j.name for j in self.joints]

    @property
    def root(self):
        return next(i for i, j in enumerate(self.joints) if j.parent is None)

    def children(self, i):
        return [k for k, j in enumerate(self.joints) if j.parent == i]

    def joint_positions(self, vertices):
        """Anchor-weighted joint locations for a mesh with template topology."""
        vertices = np.asarray(vertices)
        return np.array([j.anchor_w @ vertices[j.anchor_idx] for j in self.joints])

    def to_json(self):
        return json.dumps(
            [
                {
                    "name": j.name,
                    "parent": j.parent,
                    "anchor_idx": j.anchor_idx.tolist(),
                    "anchor_w": j.anchor_w.tolist(),
                }
                for j in self.joints
            ]
        )

    @classmethod
    def from_json(cls, text):
        return cls(
            [
                Joint(
                    name=d["name"],
                    parent=d["parent"],
                    anchor_idx=np.asarray(d["anchor_idx"], dtype=np.intp),
                    anchor_w=np.asarray(d["anchor_w"], dtype=np.float64),
                )
                for d in json.loads(text)
            ]
        )


@dataclass
class SkinningWeights:
    """Per-vertex sparse weights over joints; <= 4 nonzero, sum 1 per vertex."""

    matrix: sparse.csr_matrix  # (N, n_joints)

    def __post_init__(self):
        m = self.matrix.tocsr()
        if (m.data < -1e-12).any():
            raise SkeletonError("skinning weights must be nonnegative")
        rowsum = np.asarray(m.sum(axis=1)).ravel()
        if np.abs(rowsum - 1).max() > 1e-9:
            raise SkeletonError("skinning weights must sum to 1 per vertex")
        if np.diff(m.indptr).max() > 4:
            raise SkeletonError("at most 4 joints per vertex")
        self.matrix = m

    def to_dense(self):
        return self.matrix.toarray()


@dataclass
class Pose:
    """Per-joint exponential-map rotations plus a root translation (mm)."""

    rotations: np.ndarray  # (n_joints, 3)
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)
        if not np.isfinite(self.rotations).all():
            raise SkeletonError("non-finite pose parameters")

    @classmethod
    def rest(cls, n_joints):
        return cls(rotations=np.zeros((n_joints, 3)))

    def as_vector(self):
        return np.concatenate([self.root_translation, self.rotations.ravel()])

    @classmethod
    def from_vector(cls, v, n_joints):
        v = np.asarray(v, dtype=np.float64)
        return cls(rotations=v[3:3 + 3 * n_joints].reshape(n_joints, 3),
                   root_translation=v[:3])


def exp_rotation(r):
    """Rodrigues rotation matrix from a 3-vector (angle * axis)."""
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r)
    if theta < 1e-12:
        K = _skew(r)
        return np.eye(3) + K  # first-order; exact at 0
    k = r / theta
    K = _skew(k)
    return np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * (K @ K)


def log_rotation(R):
    """Inverse of exp_rotation for proper rotations."""
    cos = np.clip((np.trace(R) - 1) / 2, -1.0, 1.0)
    theta = np.arccos(cos)
    if theta < 1e-9:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2
    if abs(np.pi - theta) < 1e-6:
        # near pi: axis from the symmetric part
        M = (R + np.eye(3)) / 2
        axis = np.sqrt(np.maximum(np.diag(M), 0))
        axis = axis / max(np.linalg.norm(axis), 1e-12)
        # fix signs using off-diagonals
        if M[0, 1] < 0:
            axis[1] = -axis[1]
        if M[0, 2] < 0:
            axis[2] = -axis[2]
        return theta * axis
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / (2 * np.sin(theta)) * w


def _skew(v):
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


def global_joint_transforms(skeleton: Skeleton, joint_positions, pose: Pose):
    """Per-joint global rigid transforms (R, t) for the given pose.

    Each joint rotates about its own (personalized) position; the root also
    carries the pose translation.
    """
    n = len(skeleton.joints)
    Rs = [None] * n
    ts = [None] * n
    for i in skeleton._topo_order():
        j = skeleton.joints[i]
        Rl = exp_rotation(pose.rotations[i])
        p = joint_positions[i]
        # local transform: rotate about joint position p
        tl = p - Rl @ p
        if j.parent is None:
            Rs[i] = Rl
            ts[i] = tl + pose.root_translation
        else:
            Rp, tp = Rs[j.parent], ts[j.parent]
            Rs[i] = Rp @ Rl
            ts[i] = Rp @ tl + tp
    return np.array(Rs), np.array(ts)


def skin(vertices, skeleton: Skeleton, weights: SkinningWeights, pose: Pose,
         joint_positions=None):
    """Linear blend skinning of a personalized mesh into the given pose."""
    vertices = np.asarray(vertices, dtype=np.float64)
    if joint_positions is None:
        joint_positions = skeleton.joint_positions(vertices)
    Rs, ts = global_joint_transforms(skeleton, joint_positions, pose)
    W = weights.to_dense()
    # blended transform per vertex: sum_j w_vj (R_j v + t_j)
    posed = np.einsum("jab,nb->jna", Rs, vertices) + ts[:, None, :]
    return np.einsum("nj,jna->na", W, posed)


def fit_skeleton(mean_mesh_vertices, schema) -> Skeleton:
    """Instantiates a skeleton from a schema of named joints with anchors.

    ``schema`` is a list of dicts: {name, parent (index or None), anchor_idx,
    anchor_w}. Joint positions are implied by the anchors on the mesh.
    """
    joints = [
        Joint(
            name=d["name"],
            parent=d["parent"],
            anchor_idx=np.asarray(d["anchor_idx"], dtype=np.intp),
            anchor_w=np.asarray(d["anchor_w"], dtype=np.float64),
        )
        for d in schema
    ]
    return Skeleton(joints)


def compute_skinning_weights(vertices, skeleton: Skeleton, smooth_iters=10,
                             max_bones=4, faces=None) -> SkinningWeights:
    """Inverse-distance weights to the two nearest bone segments, smoothed.

    Each bone segment (parent -> child joint) is owned by its proximal joint,
    whose rotation moves it. After one-ring smoothing the weights are
    truncated to ``max_bones`` joints and renormalized.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    n = len(vertices)
    joints_pos = skeleton.joint_positions(vertices)
    segments = []  # (proximal joint index, a, b)
    for i, j in enumerate(skeleton.joints):
        if j.parent is not None:
            segments.append((j.parent, joints_pos[j.parent], joints_pos[i]))
    if not segments:
        raise SkeletonError("skeleton has no bone segments")
    d = np.stack([_point_segment_distance(vertices, a, b) for _, a, b in segments], axis=1)
    owner = np.array([s[0] for s in segments])
    n_joints = len(skeleton.joints)
    W = np.zeros((n, n_joints))
    order = np.argsort(d, axis=1)
    for v in range(n):
        for k in range(min(2, d.shape[1])):
            s = order[v, k]
            W[v, owner[s]] += 1.0 / (d[v, s] + 1.0) ** 2
    W /= W.sum(axis=1, keepdims=True)
    if smooth_iters and faces is not None:
        adj = _one_ring(faces, n)
        for _ in range(smooth_iters):
            W = 0.5 * W + 0.5 * (adj @ W)
            W /= W.sum(axis=1, keepdims=True)
    # truncate to max_bones entries per vertex
    keep = np.argsort(-W, axis=1)[:, :max_bones]
    Wt = np.zeros_like(W)
    rows = np.repeat(np.arange(n), max_bones)
    Wt[rows, keep.ravel()] = W[rows, keep.ravel()]
    Wt /= Wt.sum(axis=1, keepdims=True)
    return SkinningWeights(matrix=sparse.csr_matrix(Wt))


def _point_segment_distance(points, a, b):
    ab = b - a
    denom = float(ab @ ab)
    t = np.clip((points - a) @ ab / max(denom, 1e-30), 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(points - proj, axis=1)


def _one_ring(faces, n):
    faces = np.asarray(faces, dtype=np.intp)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    e = np.unique(e, axis=0)
    rows = np.concatenate([e[:, 0], e[:, 1]])
    cols = np.concatenate([e[:, 1], e[:, 0]])
    A = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
    deg = np.asarray(A.sum(axis=1)).ravel()
    return sparse.diags(1.0 / np.maximum(deg, 1)) @ A
