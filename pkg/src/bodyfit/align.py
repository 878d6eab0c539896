"""Rigid (optionally similarity) landmark alignment via Procrustes analysis."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .geom import GeometryError, Scan, TemplateMesh


class AlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray  # (3, 3), det +1
    translation: np.ndarray  # (3,)
    scale: float = 1.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-8 or abs(np.linalg.det(R) - 1) > 1e-8:
            raise AlignmentError("rotation must be orthonormal with det +1")
        if self.scale <= 0:
            raise AlignmentError("scale must be positive")

    def apply(self, points):
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation

    def inverse(self):
        Rinv = self.rotation.T
        return RigidTransform(
            rotation=Rinv,
            translation=-Rinv @ self.translation / self.scale,
            scale=1.0 / self.scale,
        )

    def compose(self, other):
        """self after other: apply(x) = self(other(x))."""
        return RigidTransform(
            rotation=self.rotation @ other.rotation,
            translation=self.scale * self.rotation @ other.translation + self.translation,
            scale=self.scale * other.scale,
        )


IDENTITY = None  # set below


def procrustes(source_points, target_points, with_scale=False):
    """Least-squares rigid (or similarity) transform mapping source to target.

    Reflections are excluded; requires >= 3 non-degenerate point pairs.
    """
    x = np.asarray(source_points, dtype=np.float64)
    y = np.asarray(target_points, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise AlignmentError("source and target must be matching (n, 3) arrays")
    if len(x) < 3:
        raise AlignmentError("need at least 3 point pairs")
    cx, cy = x.mean(axis=0), y.mean(axis=0)
    x0, y0 = x - cx, y - cy
    H = x0.T @ y0
    U, S, Vt = np.linalg.svd(H)
    if np.sum(S > max(S[0], 1e-30) * 1e-9) < 2:
        raise AlignmentError("degenerate (rank < 2) point configuration")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    if with_scale:
        denom = (x0 * x0).sum()
        s = float((S * np.diag(D)).sum() / denom)
    else:
        s = 1.0
    t = cy - s * R @ cx
    return RigidTransform(rotation=R, translation=t, scale=s)


def procrustes_residual(tf, source_points, target_points):
    d = tf.apply(source_points) - np.asarray(target_points)
    return float((d * d).sum())


def align_scan_to_template(scan: Scan, template: TemplateMesh, with_scale=False):
    """Rigidly aligns a landmarked scan to the template's landmark positions.

    Matching is by label; unmatched labels are skipped with a warning. Returns
    the transformed scan and the transform that was applied.
    """
    tmpl_lm = dict(zip(template.landmark_names, template.landmark_positions()))
    shared = [k for k in scan.landmarks if k in tmpl_lm]
    missing = [k for k in scan.landmarks if k not in tmpl_lm]
    if missing:
        warnings.warn(f"landmarks not in template schema, skipped: {missing}")
    if len(shared) < 3:
        missing_tmpl = [k for k in tmpl_lm if k not in scan.landmarks]
        raise AlignmentError(
            f"need >= 3 shared landmarks, have {len(shared)}; template labels "
            f"missing from scan: {missing_tmpl}"
        )
    src = np.array([scan.landmarks[k] for k in shared])
    dst = np.array([tmpl_lm[k] for k in shared])
    tf = procrustes(src, dst, with_scale=with_scale)
    return scan.transformed(tf.rotation, tf.translation, tf.scale), tf


IDENTITY = RigidTransform(rotation=np.eye(3), translation=np.zeros(3))
