"""Meshes, scans, spatial queries and differential coordinates.

Everything downstream (alignment, non-rigid fitting, shape spaces) works on
the two container types defined here. Units are millimetres throughout.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree


class GeometryError(ValueError):
    pass


def _as_points(a, name):
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 3:
        raise GeometryError(f"{name} must be (n, 3), got {a.shape}")
    return a


@dataclass
class TemplateMesh:
    """Fixed-topology triangle mesh with landmarks and named vertex regions."""

    vertices: np.ndarray  # (N, 3) mm
    faces: np.ndarray  # (F, 3) vertex indices
    landmark_names: list[str] = field(default_factory=list)
    landmark_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    region_masks: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = _as_points(self.vertices, "vertices")
        self.faces = np.ascontiguousarray(self.faces, dtype=np.intp)
        n = len(self.vertices)
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise GeometryError("faces must be (F, 3)")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise GeometryError("faces index outside the vertex set")
        used = np.zeros(n, dtype=bool)
        used[self.faces.ravel()] = True
        if not used.all():
            raise GeometryError(
                f"isolated vertices (no incident face): {np.flatnonzero(~used)[:10].tolist()}"
            )
        self.landmark_indices = np.asarray(self.landmark_indices, dtype=np.intp)
        if len(self.landmark_names) != len(self.landmark_indices):
            raise GeometryError("landmark names/indices length mismatch")
        if len(set(self.landmark_indices.tolist())) != len(self.landmark_indices):
            raise GeometryError("landmark indices must be distinct")
        if self.landmark_indices.size and (
            self.landmark_indices.min() < 0 or self.landmark_indices.max() >= n
        ):
            raise GeometryError("landmark index out of range")
        for name, mask in list(self.region_masks.items()):
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (n,):
                raise GeometryError(f"region mask {name!r} has wrong shape")
            self.region_masks[name] = mask
        if "hands" in self.region_masks and "head" in self.region_masks:
            if (self.region_masks["hands"] & self.region_masks["head"]).any():
                raise GeometryError("'hands' and 'head' regions overlap")
        self._edges = None

    @property
    def n_vertices(self):
        return len(self.vertices)

    def edges(self):
        """Unique undirected edges, each once, as an (E, 2) array with i < j."""
        if self._edges is None:
            f = self.faces
            e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
            e.sort(axis=1)
            self._edges = np.unique(e, axis=0)
        return self._edges

    def landmark_positions(self):
        return self.vertices[self.landmark_indices]

    def region_of_vertices(self):
        """Region name per vertex (first matching mask wins), None elsewhere."""
        out = np.full(self.n_vertices, None, dtype=object)
        for name, mask in self.region_masks.items():
            out[mask & (out == None)] = name  # noqa: E711
        return out


@dataclass
class Scan:
    """Point set with unit normals, optional labeled landmarks and provenance id."""

    points: np.ndarray  # (M, 3) mm
    normals: np.ndarray  # (M, 3) unit
    landmarks: dict[str, np.ndarray] = field(default_factory=dict)
    id: str = ""

    def __post_init__(self):
        self.points = _as_points(self.points, "points")
        self.normals = _as_points(self.normals, "normals")
        if len(self.points) != len(self.normals):
            raise GeometryError("points and normals have different lengths")
        if len(self.normals):
            norms = np.linalg.norm(self.normals, axis=1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise GeometryError("normals must have unit norm (within 1e-6)")
        self.landmarks = {k: np.asarray(v, dtype=np.float64) for k, v in self.landmarks.items()}
        self._tree = None

    def __len__(self):
        return len(self.points)

    def tree(self) -> cKDTree:
        """Spatial index, built once; the scan is immutable afterwards."""
        if self._tree is None:
            if len(self.points) == 0:
                raise GeometryError("cannot build spatial index on an empty scan")
            self._tree = cKDTree(self.points)
        return self._tree

    def transformed(self, rotation, translation, scale=1.0):
        pts = scale * self.points @ np.asarray(rotation).T + translation
        nrm = self.normals @ np.asarray(rotation).T
        lms = {k: scale * np.asarray(rotation) @ v + translation for k, v in self.landmarks.items()}
        return Scan(points=pts, normals=nrm, landmarks=lms, id=self.id)


@dataclass(frozen=True)
class CompatibilityPredicate:
    """Distance/normal gates for nearest-neighbor correspondences.

    Defaults follow the standard gating of 20 mm and 60 degrees; regions may
    override both (e.g. a looser gate for the head).
    """

    max_distance: float = 20.0
    max_normal_angle: float = 60.0
    region_overrides: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.max_distance <= 0:
            raise GeometryError("max_distance must be positive")
        if not (0 < self.max_normal_angle <= 180):
            raise GeometryError("max_normal_angle must be in (0, 180]")

    def effective(self, region):
        if region is not None and region in self.region_overrides:
            return self.region_overrides[region]
        return self.max_distance, self.max_normal_angle

    def thresholds_for(self, regions):
        """Per-query (distance, cos angle) threshold arrays for a region array."""
        regions = np.asarray(regions, dtype=object)
        dist = np.full(len(regions), self.max_distance)
        cosang = np.full(len(regions), np.cos(np.radians(self.max_normal_angle)))
        for name, (d, a) in self.region_overrides.items():
            sel = regions == name
            dist[sel] = d
            cosang[sel] = np.cos(np.radians(a))
        return dist, cosang


@dataclass(frozen=True)
class LaplacianCoords:
    deltas: np.ndarray  # (N, 3) mm
    scheme: str  # "uniform" | "cotangent"


def face_normals_and_areas(vertices, faces):
    v = vertices
    cross = np.cross(v[faces[:, 1]] - v[faces[:, 0]], v[faces[:, 2]] - v[faces[:, 0]])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    normals = np.zeros_like(cross)
    ok = areas > 0
    normals[ok] = cross[ok] / (2.0 * areas[ok, None])
    return normals, areas


def compute_vertex_normals(mesh_or_vertices, faces=None):
    """Area-weighted vertex normals; zero-area faces contribute nothing."""
    if faces is None:
        vertices, faces = mesh_or_vertices.vertices, mesh_or_vertices.faces
    else:
        vertices = _as_points(mesh_or_vertices, "vertices")
    fn, areas = face_normals_and_areas(vertices, faces)
    acc = np.zeros_like(vertices)
    w = fn * areas[:, None]
    for c in range(3):
        np.add.at(acc, faces[:, c], w)
    norms = np.linalg.norm(acc, axis=1)
    incident = np.zeros(len(vertices), dtype=bool)
    incident[faces.ravel()] = True
    if not incident.all():
        raise GeometryError(
            f"isolated vertex has no incident faces: {int(np.flatnonzero(~incident)[0])}"
        )
    # Vertices whose incident faces are all degenerate get an arbitrary unit z.
    zero = norms == 0
    acc[zero] = (0.0, 0.0, 1.0)
    norms[zero] = 1.0
    return acc / norms[:, None]


def nearest_compatible_batch(points, normals, scan, dist_thresh, cos_thresh):
    """Nearest scan point per query, with 0/1 compatibility weights.

    dist_thresh / cos_thresh may be scalars or per-query arrays. Returns
    (indices, weights); the index is always the Euclidean nearest neighbor,
    the weight is 1 only when it passes both gates.
    """
    points = _as_points(points, "query points")
    d, idx = scan.tree().query(points, k=1)
    cos = np.einsum("ij,ij->i", np.asarray(normals), scan.normals[idx])
    w = ((d < dist_thresh) & (cos > cos_thresh)).astype(np.float64)
    return idx, w


def nearest_compatible(query_point, query_normal, scan, pred, region=None):
    """Single-query form of the compatible nearest-neighbor gate."""
    max_d, max_a = pred.effective(region)
    idx, w = nearest_compatible_batch(
        np.asarray(query_point)[None, :],
        np.asarray(query_normal)[None, :],
        scan,
        max_d,
        np.cos(np.radians(max_a)),
    )
    return int(idx[0]), float(w[0])


def subsample_scan(scan, target_count, seed=0):
    """Seeded uniform subsample without replacement; landmarks always kept."""
    if len(scan) == 0:
        raise GeometryError("cannot subsample an empty scan")
    if target_count < 4:
        raise GeometryError("target_count must be >= 4")
    if target_count >= len(scan):
        return scan
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.choice(len(scan), size=target_count, replace=False))
    return Scan(
        points=scan.points[keep],
        normals=scan.normals[keep],
        landmarks=dict(scan.landmarks),
        id=scan.id,
    )


def build_laplacian(faces, n_vertices, scheme="uniform", vertices=None):
    """Sparse L with rows delta_i = v_i - sum_j w_ij v_j over the one-ring."""
    faces = np.asarray(faces, dtype=np.intp)
    if scheme == "uniform":
        e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        e.sort(axis=1)
        e = np.unique(e, axis=0)
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        W = sparse.coo_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(n_vertices, n_vertices)
        ).tocsr()
    elif scheme == "cotangent":
        if vertices is None:
            raise GeometryError("cotangent weights need vertex positions")
        W = _cotangent_weights(vertices, faces, n_vertices)
    else:
        raise GeometryError(f"unknown Laplacian scheme {scheme!r}")
    deg = np.asarray(W.sum(axis=1)).ravel()
    if (deg <= 0).any():
        raise GeometryError("vertex with empty one-ring in Laplacian")
    Dinv = sparse.diags(1.0 / deg)
    return (sparse.identity(n_vertices) - Dinv @ W).tocsr()


def _cotangent_weights(vertices, faces, n_vertices):
    v = np.asarray(vertices, dtype=np.float64)
    rows, cols, vals = [], [], []
    bad = set()
    for (a, b, c) in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        # cotangent at corner `a` weights edge (b, c)
        u = v[faces[:, b]] - v[faces[:, a]]
        w_ = v[faces[:, c]] - v[faces[:, a]]
        cross = np.linalg.norm(np.cross(u, w_), axis=1)
        dot = np.einsum("ij,ij->i", u, w_)
        degen = cross < 1e-12
        if degen.any():
            bad.update(faces[degen].ravel().tolist())
        cot = np.where(degen, 0.0, dot / np.maximum(cross, 1e-30))
        rows.extend([faces[:, b], faces[:, c]])
        cols.extend([faces[:, c], faces[:, b]])
        vals.extend([cot, cot])
    W = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_vertices, n_vertices),
    ).tolil()
    if bad:
        warnings.warn(
            f"degenerate triangles; falling back to uniform weights at {len(bad)} vertices"
        )
    # Non-positive row sums (including the degenerate fallback) become uniform.
    deg = np.asarray(W.sum(axis=1)).ravel()
    fix = set(np.flatnonzero(deg <= 1e-12).tolist()) | bad
    if fix:
        e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
        e.sort(axis=1)
        e = np.unique(e, axis=0)
        adj = sparse.coo_matrix(
            (
                np.ones(2 * len(e)),
                (np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]])),
            ),
            shape=(n_vertices, n_vertices),
        ).tolil()
        for i in fix:
            W[i, :] = adj[i, :]
    return W.tocsr()


def laplacian_coordinates(vertices, faces, scheme="uniform"):
    """Differential coordinates of each vertex relative to its one-ring."""
    vertices = _as_points(vertices, "vertices")
    L = build_laplacian(faces, len(vertices), scheme=scheme, vertices=vertices)
    return LaplacianCoords(deltas=L @ vertices, scheme=scheme)


def estimate_normals(points, k=12):
    """Local plane-fit normals, oriented by propagation from the topmost point."""
    points = _as_points(points, "points")
    m = len(points)
    if m < 3:
        raise GeometryError("need at least 3 points to estimate normals")
    k = min(k, m - 1)
    tree = cKDTree(points)
    _, nbrs = tree.query(points, k=k + 1)
    normals = np.zeros_like(points)
    for i in range(m):
        nb = points[nbrs[i]]
        nb = nb - nb.mean(axis=0)
        _, _, vt = np.linalg.svd(nb, full_matrices=False)
        normals[i] = vt[2]
    # Propagate a consistent orientation over the kNN graph from the topmost
    # point, seeded to face away from the centroid.
    seed = int(np.argmax(points[:, 2]))
    out = points[seed] - points.mean(axis=0)
    if np.dot(normals[seed], out) < 0:
        normals[seed] = -normals[seed]
    seen = np.zeros(m, dtype=bool)
    seen[seed] = True
    stack = [seed]
    while stack:
        i = stack.pop()
        for j in nbrs[i][1:]:
            if not seen[j]:
                if np.dot(normals[j], normals[i]) < 0:
                    normals[j] = -normals[j]
                seen[j] = True
                stack.append(int(j))
    # Disconnected kNN components: orient each away from the centroid.
    for j in np.flatnonzero(~seen):
        if np.dot(normals[j], points[j] - points.mean(axis=0)) < 0:
            normals[j] = -normals[j]
    return normals
