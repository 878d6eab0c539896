"""Procedural humanoid template generator.

Builds a watertight body mesh from a capsule-union signed distance field via
marching cubes, decimates it to an exact vertex count, and derives landmark
vertices, hand/head region masks and a 15-joint skeleton schema with surface
anchors. Deterministic for a given vertex count. Units are millimetres.
"""

from __future__ import annotations

import heapq
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .geom import TemplateMesh

# canonical joint centers (x right, y forward, z up), standing A-pose
JOINTS = [
    ("pelvis", None, (0.0, 0.0, 1000.0)),
    ("spine", "pelvis", (0.0, 0.0, 1260.0)),
    ("neck", "spine", (0.0, 0.0, 1480.0)),
    ("head", "neck", (0.0, 0.0, 1600.0)),
    # arms abducted well clear of the torso so coarse surface extractions
    # keep the inner arm separated from the body
    ("l_shoulder", "spine", (170.0, 0.0, 1430.0)),
    ("l_elbow", "l_shoulder", (310.0, 0.0, 1150.0)),
    ("l_wrist", "l_elbow", (400.0, 0.0, 930.0)),
    ("r_shoulder", "spine", (-170.0, 0.0, 1430.0)),
    ("r_elbow", "r_shoulder", (-310.0, 0.0, 1150.0)),
    ("r_wrist", "r_elbow", (-400.0, 0.0, 930.0)),
    ("l_hip", "pelvis", (90.0, 0.0, 960.0)),
    ("l_knee", "l_hip", (100.0, 0.0, 530.0)),
    ("l_ankle", "l_knee", (105.0, 0.0, 90.0)),
    ("r_hip", "pelvis", (-90.0, 0.0, 960.0)),
    ("r_knee", "r_hip", (-100.0, 0.0, 530.0)),
    ("r_ankle", "r_knee", (-105.0, 0.0, 90.0)),
]
JOINT_NAMES = [j[0] for j in JOINTS]
JOINT_POS = {j[0]: np.array(j[2]) for j in JOINTS}
JOINT_PARENT = {j[0]: j[1] for j in JOINTS}

# capsules: (name, endpoint a, endpoint b, radius)
CAPSULES = [
    ("torso_lower", JOINT_POS["pelvis"], JOINT_POS["spine"], 150.0),
    ("torso_upper", JOINT_POS["spine"], JOINT_POS["neck"], 130.0),
    ("neck", JOINT_POS["neck"], JOINT_POS["head"], 55.0),
    ("head", JOINT_POS["head"], JOINT_POS["head"] + (0, 0, 110), 85.0),
    ("l_upper_arm", JOINT_POS["l_shoulder"], JOINT_POS["l_elbow"], 48.0),
    ("l_forearm", JOINT_POS["l_elbow"], JOINT_POS["l_wrist"], 38.0),
    ("l_hand", JOINT_POS["l_wrist"], JOINT_POS["l_wrist"] + (55, 0, -55), 30.0),
    ("r_upper_arm", JOINT_POS["r_shoulder"], JOINT_POS["r_elbow"], 48.0),
    ("r_forearm", JOINT_POS["r_elbow"], JOINT_POS["r_wrist"], 38.0),
    ("r_hand", JOINT_POS["r_wrist"], JOINT_POS["r_wrist"] + (-55, 0, -55), 30.0),
    ("l_thigh", JOINT_POS["l_hip"], JOINT_POS["l_knee"], 75.0),
    ("l_shin", JOINT_POS["l_knee"], JOINT_POS["l_ankle"], 52.0),
    ("l_foot", JOINT_POS["l_ankle"], JOINT_POS["l_ankle"] + (0, 130, -40), 42.0),
    ("r_thigh", JOINT_POS["r_hip"], JOINT_POS["r_knee"], 75.0),
    ("r_shin", JOINT_POS["r_knee"], JOINT_POS["r_ankle"], 52.0),
    ("r_foot", JOINT_POS["r_ankle"], JOINT_POS["r_ankle"] + (0, 130, -40), 42.0),
]

LANDMARK_PROBES = {
    "head_top": JOINT_POS["head"] + (0, 0, 196),
    "chest": (0.0, 131.0, 1350.0),
    "navel": (0.0, 151.0, 1080.0),
    "lower_back": (0.0, -151.0, 1130.0),
    "l_shoulder_tip": JOINT_POS["l_shoulder"] + (48, 0, 30),
    "l_elbow_out": JOINT_POS["l_elbow"] + (45, 0, 0),
    "l_wrist_out": JOINT_POS["l_wrist"] + (38, 0, 0),
    "l_hand_tip": JOINT_POS["l_wrist"] + (78, 0, -78),
    "l_hip_out": JOINT_POS["l_hip"] + (76, 0, 0),
    "l_knee_front": JOINT_POS["l_knee"] + (0, 76, 0),
    "l_ankle_out": JOINT_POS["l_ankle"] + (53, 0, 0),
    "l_toe": JOINT_POS["l_ankle"] + (0, 173, -40),
    "r_shoulder_tip": JOINT_POS["r_shoulder"] + (-48, 0, 30),
    "r_elbow_out": JOINT_POS["r_elbow"] + (-45, 0, 0),
    "r_wrist_out": JOINT_POS["r_wrist"] + (-38, 0, 0),
    "r_hand_tip": JOINT_POS["r_wrist"] + (-78, 0, -78),
    "r_hip_out": JOINT_POS["r_hip"] + (-76, 0, 0),
    "r_knee_front": JOINT_POS["r_knee"] + (0, 76, 0),
    "r_ankle_out": JOINT_POS["r_ankle"] + (-53, 0, 0),
    "r_toe": JOINT_POS["r_ankle"] + (0, 173, -40),
}


def _capsule_distances(points, min_radius=0.0):
    """(n_points, n_capsules) signed distances to each capsule surface."""
    out = np.empty((len(points), len(CAPSULES)))
    for k, (_, a, b, r) in enumerate(CAPSULES):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        ab = b - a
        t = np.clip((points - a) @ ab / (ab @ ab), 0.0, 1.0)
        proj = a + t[:, None] * ab
        out[:, k] = np.linalg.norm(points - proj, axis=1) - max(r, min_radius)
    return out


def _marching_cubes(spacing):
    lo = np.array([-480.0, -220.0, -20.0])
    hi = np.array([480.0, 320.0, 1920.0])
    nx, ny, nz = [int(np.ceil((hi[i] - lo[i]) / spacing)) + 1 for i in range(3)]
    xs = lo[0] + spacing * np.arange(nx)
    ys = lo[1] + spacing * np.arange(ny)
    zs = lo[2] + spacing * np.arange(nz)
    grid = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
    sdf = _capsule_distances(grid, min_radius=1.4 * spacing).min(axis=1)
    vol = sdf.reshape(nx, ny, nz)
    verts, faces, _, _ = measure.marching_cubes(vol, level=0.0, spacing=(spacing,) * 3)
    verts = verts + lo
    return verts, faces.astype(np.intp)


def _largest_component(verts, faces):
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    n = len(verts)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    counts = np.bincount(labels)
    keep_label = counts.argmax()
    keep = labels == keep_label
    remap = -np.ones(n, dtype=np.intp)
    remap[keep] = np.arange(keep.sum())
    fkeep = keep[faces].all(axis=1)
    return verts[keep], remap[faces[fkeep]]


def _decimate_to_count(verts, faces, target):
    """Shortest-edge collapses under the link condition, to an exact count."""
    verts = verts.copy()
    nbrs = [set() for _ in range(len(verts))]
    face_set = set()
    vfaces = [set() for _ in range(len(verts))]
    flist = []
    for f in faces:
        t = tuple(int(x) for x in f)
        flist.append(list(t))
        fi = len(flist) - 1
        for a in t:
            vfaces[a].add(fi)
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            nbrs[a].add(b)
            nbrs[b].add(a)
        face_set.add(tuple(sorted(t)))
    alive = np.ones(len(verts), dtype=bool)
    falive = np.ones(len(flist), dtype=bool)
    nv = len(verts)

    heap = []
    def push_edges(u):
        for v in nbrs[u]:
            a, b = (u, v) if u < v else (v, u)
            heapq.heappush(heap, (float(np.linalg.norm(verts[a] - verts[b])), a, b))

    for u in range(len(verts)):
        for v in nbrs[u]:
            if u < v:
                heapq.heappush(heap, (float(np.linalg.norm(verts[u] - verts[v])), u, v))

    while nv > target and heap:
        d, u, v = heapq.heappop(heap)
        if not (alive[u] and alive[v]) or v not in nbrs[u]:
            continue
        cur = float(np.linalg.norm(verts[u] - verts[v]))
        if abs(cur - d) > 1e-9:
            continue  # stale entry
        if len(nbrs[u] & nbrs[v]) != 2:
            continue  # link condition: collapse would break manifoldness
        # collapse v into u at the midpoint
        verts[u] = 0.5 * (verts[u] + verts[v])
        alive[v] = False
        nv -= 1
        for fi in list(vfaces[v]):
            if not falive[fi]:
                continue
            f = flist[fi]
            face_set.discard(tuple(sorted(f)))
            if u in f:
                falive[fi] = False
                for a in f:
                    vfaces[a].discard(fi)
                continue
            f[f.index(v)] = u
            key = tuple(sorted(f))
            if key in face_set:
                falive[fi] = False
                for a in f:
                    vfaces[a].discard(fi)
                continue
            face_set.add(key)
            vfaces[u].add(fi)
            vfaces[v].discard(fi)
        for w in list(nbrs[v]):
            nbrs[w].discard(v)
            if w != u:
                nbrs[w].add(u)
                nbrs[u].add(w)
        nbrs[u].discard(u)
        nbrs[v] = set()
        push_edges(u)

    if nv != target:
        raise RuntimeError(f"decimation stalled at {nv} vertices (target {target})")
    remap = -np.ones(len(verts), dtype=np.intp)
    remap[alive] = np.arange(nv)
    out_faces = np.array(
        [[remap[a] for a in flist[fi]] for fi in range(len(flist)) if falive[fi]],
        dtype=np.intp,
    )
    out_verts = verts[alive]
    used = np.zeros(nv, dtype=bool)
    used[out_faces.ravel()] = True
    if not used.all():
        raise RuntimeError("decimation produced isolated vertices")
    return out_verts, out_faces


def _build_for_spacing(spacing):
    verts, faces = _marching_cubes(spacing)
    return _largest_component(verts, faces)


def _pick_spacing(target):
    """Finds a grid spacing whose largest component has >= target vertices,
    staying close to the target to keep decimation light."""
    lo_s, hi_s = 8.0, 80.0
    best = None
    for _ in range(18):
        mid = 0.5 * (lo_s + hi_s)
        verts, faces = _build_for_spacing(mid)
        n = len(verts)
        if n >= target:
            best = (mid, verts, faces)
            if n <= int(target * 1.25):
                break
            lo_s = mid
        else:
            hi_s = mid
    if best is None:
        raise RuntimeError(f"could not reach {target} vertices")
    return best


def _nearest_distinct(tree, probes, taken):
    idx = []
    for p in probes:
        k = 1
        while True:
            _, cand = tree.query(p, k=k)
            cand = np.atleast_1d(cand)
            fresh = [c for c in cand if c not in taken]
            if fresh:
                idx.append(int(fresh[0]))
                taken.add(int(fresh[0]))
                break
            k += 4
    return idx


@lru_cache(maxsize=4)
def make_template(n_vertices=6449):
    """Builds the default humanoid template with exactly ``n_vertices`` vertices.

    Returns (TemplateMesh, joint schema). The schema is a list of
    {name, parent, anchor_idx, anchor_w} dicts consumable by fit_skeleton.
    """
    spacing, verts, faces = _pick_spacing(n_vertices)
    verts, faces = _decimate_to_count(verts, faces, n_vertices)
    tree = cKDTree(verts)

    cap_d = _capsule_distances(verts, min_radius=1.4 * spacing)
    nearest_cap = cap_d.argmin(axis=1)
    cap_names = [c[0] for c in CAPSULES]
    hands = np.isin(nearest_cap, [cap_names.index("l_hand"), cap_names.index("r_hand")])
    head = nearest_cap == cap_names.index("head")

    taken = set()
    names = list(LANDMARK_PROBES.keys())
    lm_idx = _nearest_distinct(tree, [np.asarray(LANDMARK_PROBES[n], float) for n in names], taken)

    schema = []
    name_to_i = {n: i for i, n in enumerate(JOINT_NAMES)}
    for name in JOINT_NAMES:
        pos = JOINT_POS[name]
        d, anchor = tree.query(pos, k=8)
        w = 1.0 / (np.asarray(d) + 1.0) ** 2
        w /= w.sum()
        parent = JOINT_PARENT[name]
        schema.append(
            {
                "name": name,
                "parent": None if parent is None else name_to_i[parent],
                "anchor_idx": np.asarray(anchor, dtype=np.intp).tolist(),
                "anchor_w": w.tolist(),
            }
        )

    mesh = TemplateMesh(
        vertices=verts,
        faces=faces,
        landmark_names=names,
        landmark_indices=np.asarray(lm_idx, dtype=np.intp),
        region_masks={"hands": hands & ~head, "head": head},
    )
    return mesh, schema
