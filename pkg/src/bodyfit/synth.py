"""Synthetic body corpus generator.

Bodies are drawn from a known linear displacement-field model on the
template topology, optionally pose-jittered through the skeleton, and
sampled into noisy point-cloud scans with exact landmark positions. The
latent parameters and ground-truth geometry are written alongside the scans,
so downstream fits can be checked against the generator.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geom import TemplateMesh, face_normals_and_areas
from .humanoid import make_template
from .meshio import (
    write_obj,
    write_ply,
    write_region_masks,
    write_scan_landmarks,
    write_template_landmarks,
)
from .skeleton import Pose, compute_skinning_weights, fit_skeleton

# per-mode standard deviations (mm of total displacement norm), descending
DEFAULT_SIGMAS = [30.0, 20.0, 12.0, 8.0, 5.0, 3.0]

# joints that receive pose jitter (arms mostly, matching standing-scan noise)
JITTER_JOINTS = ["l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_hip", "r_hip"]


def _rigid_motion_basis(vertices):
    """Orthonormal basis of infinitesimal rigid motions (6, 3N)."""
    n = len(vertices)
    c = vertices - vertices.mean(axis=0)
    basis = np.zeros((6, n, 3))
    for a in range(3):
        basis[a, :, a] = 1.0
    basis[3] = np.cross([1, 0, 0], c)
    basis[4] = np.cross([0, 1, 0], c)
    basis[5] = np.cross([0, 0, 1], c)
    B = basis.reshape(6, -1)
    q, _ = np.linalg.qr(B.T)
    return q.T  # (6, 3N)


def shape_modes(template: TemplateMesh, dims, seed=1234):
    """Orthonormal displacement fields, orthogonal to rigid motions.

    The first modes are anatomically flavored (height, girth, arm length,
    head size, leg length, belly); extras are smooth random low-frequency
    fields. Returns (fields (dims, 3N), sigmas (dims,)).
    """
    v = template.vertices
    n = len(v)
    z = v[:, 2]
    zc = z - z.mean()
    fields = []

    def add(f):
        fields.append(np.asarray(f, dtype=np.float64).reshape(-1))

    # height stretch
    f = np.zeros((n, 3))
    f[:, 2] = zc
    add(f)
    if dims >= 2:  # girth, torso-weighted radial
        f = np.zeros((n, 3))
        wz = np.exp(-((z - 1150.0) / 350.0) ** 2)
        f[:, 0] = v[:, 0] * wz
        f[:, 1] = v[:, 1] * wz
        add(f)
    if dims >= 3:  # arm length, outward along x past the shoulders
        f = np.zeros((n, 3))
        warm = np.clip((np.abs(v[:, 0]) - 140.0) / 120.0, 0.0, 1.0)
        f[:, 0] = np.sign(v[:, 0]) * warm * (np.abs(v[:, 0]) - 140.0)
        add(f)
    if dims >= 4:  # head size
        f = np.zeros((n, 3))
        wh = np.clip((z - 1480.0) / 120.0, 0.0, 1.0)
        center = np.array([0.0, 0.0, 1600.0])
        f[:] = (v - center) * wh[:, None]
        add(f)
    if dims >= 5:  # leg length
        f = np.zeros((n, 3))
        wl = np.clip((960.0 - z) / 300.0, 0.0, 1.0)
        f[:, 2] = -wl * (960.0 - z) / 900.0 * 400.0
        add(f)
    if dims >= 6:  # belly
        f = np.zeros((n, 3))
        wb = np.exp(-((z - 1050.0) / 140.0) ** 2) * np.clip(v[:, 1] / 120.0, 0.0, 1.5)
        f[:, 1] = wb * 100.0
        add(f)
    rng = np.random.default_rng(seed)
    while len(fields) < dims:
        # smooth random field: low-frequency sinusoids of the coordinates
        freq = rng.uniform(0.5, 2.0, size=3)
        phase = rng.uniform(0, 2 * np.pi, size=3)
        amp = rng.normal(size=(3, 3))
        s = np.stack(
            [np.sin(freq[a] * v[:, a] / 400.0 + phase[a]) for a in range(3)], axis=1
        )
        add(s @ amp)

    F = np.stack(fields[:dims])  # (dims, 3N)
    rigid = _rigid_motion_basis(v)
    F = F - (F @ rigid.T) @ rigid
    # Gram-Schmidt to orthonormal columns
    Q = []
    for f in F:
        for q in Q:
            f = f - (f @ q) * q
        nf = np.linalg.norm(f)
        if nf < 1e-9:
            raise ValueError("degenerate shape mode")
        Q.append(f / nf)
    sigmas = np.array(
        [DEFAULT_SIGMAS[i] if i < len(DEFAULT_SIGMAS) else 2.0 for i in range(dims)]
    )
    # scale so a coefficient of c mm moves vertices by c mm RMS; keeps the
    # fields mutually orthogonal with equal norms
    return np.stack(Q) * np.sqrt(n), sigmas


def sample_surface(vertices, faces, count, rng, noise_sigma=0.0):
    """Uniform-by-area surface samples with face normals and optional noise."""
    normals, areas = face_normals_and_areas(np.asarray(vertices), np.asarray(faces))
    p = areas / areas.sum()
    fidx = rng.choice(len(faces), size=count, p=p)
    u = rng.random(count)
    w = rng.random(count)
    flip = u + w > 1
    u[flip], w[flip] = 1 - u[flip], 1 - w[flip]
    tri = np.asarray(vertices)[np.asarray(faces)[fidx]]
    pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + w[:, None] * (tri[:, 2] - tri[:, 0])
    if noise_sigma > 0:
        pts = pts + rng.normal(scale=noise_sigma, size=pts.shape)
    return pts, normals[fidx]


class SynthGenerator:
    """Deterministic generator bound to a template resolution and latent size."""

    def __init__(self, dims=3, template_vertices=900, seed=7, pose_jitter=0.0,
                 noise_sigma=0.0, points_factor=3):
        self.dims = dims
        self.seed = seed
        self.pose_jitter = pose_jitter
        self.noise_sigma = noise_sigma
        self.points_factor = points_factor
        self.template, self.joint_schema = make_template(template_vertices)
        self.fields, self.sigmas = shape_modes(self.template, dims)
        self.skeleton = fit_skeleton(self.template.vertices, self.joint_schema)
        self.skinning = compute_skinning_weights(
            self.template.vertices, self.skeleton, faces=self.template.faces
        )

    def body(self, latent):
        disp = (np.asarray(latent) @ self.fields).reshape(-1, 3)
        return self.template.vertices + disp

    def draw(self, rng):
        """One body: returns (latent, pose, vertices at rest, posed vertices)."""
        latent = rng.normal(size=self.dims) * self.sigmas
        rest = self.body(latent)
        nj = len(self.skeleton.joints)
        rot = np.zeros((nj, 3))
        if self.pose_jitter > 0:
            names = self.skeleton.names
            for jn in JITTER_JOINTS:
                rot[names.index(jn)] = rng.normal(scale=self.pose_jitter, size=3)
        pose = Pose(rotations=rot)
        from .skeleton import skin

        posed = skin(rest, self.skeleton, self.skinning, pose)
        return latent, pose, rest, posed

    def scan_of(self, posed_vertices, rng):
        count = self.points_factor * self.template.n_vertices
        return sample_surface(posed_vertices, self.template.faces, count, rng,
                              noise_sigma=self.noise_sigma)

    def landmarks_of(self, posed_vertices):
        return {
            name: posed_vertices[vi]
            for name, vi in zip(self.template.landmark_names, self.template.landmark_indices)
        }


def synth_corpus(out_dir, dims=3, size=100, pose_jitter=0.0, noise_sigma=0.0,
                 seed=7, template_vertices=900, points_factor=3):
    """Writes a complete synthetic dataset directory; returns its Path.

    Layout: template/ (OBJ + landmark/mask/schema JSON), scans/ (PLY +
    landmark JSON per scan), ground_truth.npz (latents, poses, rest and
    posed vertices), manifest.json.
    """
    if dims < 1:
        raise ValueError("dims must be >= 1")
    out = Path(out_dir)
    (out / "template").mkdir(parents=True, exist_ok=True)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    gen = SynthGenerator(dims=dims, template_vertices=template_vertices, seed=seed,
                         pose_jitter=pose_jitter, noise_sigma=noise_sigma,
                         points_factor=points_factor)
    t = gen.template
    write_obj(out / "template" / "template.obj", t.vertices, t.faces)
    write_template_landmarks(out / "template" / "landmarks.json",
                             t.landmark_names, t.landmark_indices)
    write_region_masks(out / "template" / "region_masks.json", t.region_masks)
    with open(out / "template" / "joint_schema.json", "w") as fh:
        json.dump(gen.joint_schema, fh)

    rng = np.random.default_rng(seed)
    latents, poses, rests, poseds = [], [], [], []
    ids = []
    for i in range(size):
        latent, pose, rest, posed = gen.draw(rng)
        pts, nrm = gen.scan_of(posed, rng)
        sid = f"synth_{i:04d}"
        write_ply(out / "scans" / f"{sid}.ply", pts, normals=nrm)
        write_scan_landmarks(out / "scans" / f"{sid}_landmarks.json", gen.landmarks_of(posed))
        latents.append(latent)
        poses.append(pose.as_vector())
        rests.append(rest)
        poseds.append(posed)
        ids.append(sid)
    np.savez(
        out / "ground_truth.npz",
        latents=np.asarray(latents),
        poses=np.asarray(poses),
        rest_vertices=np.asarray(rests),
        posed_vertices=np.asarray(poseds),
        sigmas=gen.sigmas,
        fields=gen.fields,
    )
    manifest = {
        "ids": ids,
        "dims": dims,
        "size": size,
        "seed": seed,
        "pose_jitter": pose_jitter,
        "noise_sigma": noise_sigma,
        "template_vertices": template_vertices,
        "points_factor": points_factor,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return out
