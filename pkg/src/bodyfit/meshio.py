"""File formats: ASCII OBJ, binary little-endian PLY, landmark/mask JSON."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .geom import GeometryError, Scan, TemplateMesh, estimate_normals


def read_obj(path):
    """Returns (vertices, faces). Only v/f records are interpreted."""
    vertices, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                if len(idx) < 3:
                    raise GeometryError(f"face with <3 vertices in {path}")
                for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not vertices:
        raise GeometryError(f"no vertices in OBJ file {path}")
    return np.array(vertices, dtype=np.float64), np.array(faces, dtype=np.intp).reshape(-1, 3)


def write_obj(path, vertices, faces):
    with open(path, "w") as fh:
        for v in np.asarray(vertices):
            fh.write(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}\n")
        for f in np.asarray(faces, dtype=np.intp):
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def write_ply(path, points, normals=None, faces=None):
    """Binary little-endian PLY; float32 positions, optional normals and faces."""
    points = np.asarray(points, dtype="<f4")
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(points)}"]
    header += ["property float x", "property float y", "property float z"]
    cols = [points]
    if normals is not None:
        header += ["property float nx", "property float ny", "property float nz"]
        cols.append(np.asarray(normals, dtype="<f4"))
    if faces is not None:
        faces = np.asarray(faces, dtype="<i4")
        header.append(f"element face {len(faces)}")
        header.append("property list uchar int vertex_indices")
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.hstack(cols).astype("<f4").tobytes())
        if faces is not None:
            counts = np.full((len(faces), 1), 3, dtype="u1")
            buf = bytearray()
            for f in faces:
                buf += struct.pack("<B3i", 3, *f)
            fh.write(bytes(buf))


def read_ply(path):
    """Reads binary little-endian PLY written by this package (and compatible files).

    Returns dict with 'points', optional 'normals', optional 'faces'.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise GeometryError(f"parse failure: not a PLY file: {path}")
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[end + len(b"end_header\n"):]
    if "format binary_little_endian 1.0" not in header:
        raise GeometryError(f"parse failure: unsupported PLY format in {path}")
    n_vertex = n_face = 0
    vprops = []
    element = None
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "element":
            element = parts[1]
            if element == "vertex":
                n_vertex = int(parts[2])
            elif element == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and element == "vertex":
            if parts[1] != "float":
                raise GeometryError(f"parse failure: non-float vertex property in {path}")
            vprops.append(parts[2])
    vbytes = 4 * len(vprops) * n_vertex
    varr = np.frombuffer(body[:vbytes], dtype="<f4").reshape(n_vertex, len(vprops))
    out = {}
    try:
        ix = [vprops.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise GeometryError(f"parse failure: missing x/y/z in {path}")
    out["points"] = varr[:, ix].astype(np.float64)
    if all(c in vprops for c in ("nx", "ny", "nz")):
        out["normals"] = varr[:, [vprops.index(c) for c in ("nx", "ny", "nz")]].astype(np.float64)
    if n_face:
        faces = np.zeros((n_face, 3), dtype=np.intp)
        off = vbytes
        for i in range(n_face):
            cnt = body[off]
            if cnt != 3:
                raise GeometryError(f"parse failure: non-triangle face in {path}")
            faces[i] = struct.unpack_from("<3i", body, off + 1)
            off += 1 + 12
        out["faces"] = faces
    return out


def read_scan(path, id=None, normal_k=12):
    """Loads a scan from PLY; estimates normals when the file has none."""
    path = Path(path)
    d = read_ply(path)
    pts = d["points"]
    if "normals" in d and np.abs(np.linalg.norm(d["normals"], axis=1) - 1).max() < 1e-3:
        nrm = d["normals"]
        nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    else:
        nrm = estimate_normals(pts, k=normal_k)
    return Scan(points=pts, normals=nrm, id=id or path.stem)


def read_scan_landmarks(path):
    """JSON array of {label, position: [x, y, z]} -> ordered dict."""
    with open(path) as fh:
        arr = json.load(fh)
    return {e["label"]: np.asarray(e["position"], dtype=np.float64) for e in arr}


def write_scan_landmarks(path, landmarks):
    arr = [{"label": k, "position": list(map(float, v))} for k, v in landmarks.items()]
    with open(path, "w") as fh:
        json.dump(arr, fh, indent=1)


def read_template_landmarks(path):
    """JSON array of {label, vertex_index} -> (names, indices)."""
    with open(path) as fh:
        arr = json.load(fh)
    return [e["label"] for e in arr], np.array([e["vertex_index"] for e in arr], dtype=np.intp)


def write_template_landmarks(path, names, indices):
    arr = [{"label": n, "vertex_index": int(i)} for n, i in zip(names, indices)]
    with open(path, "w") as fh:
        json.dump(arr, fh, indent=1)


def read_region_masks(path, n_vertices):
    with open(path) as fh:
        raw = json.load(fh)
    masks = {}
    for name, idx in raw.items():
        m = np.zeros(n_vertices, dtype=bool)
        m[np.asarray(idx, dtype=np.intp)] = True
        masks[name] = m
    return masks


def write_region_masks(path, masks):
    raw = {name: np.flatnonzero(m).tolist() for name, m in masks.items()}
    with open(path, "w") as fh:
        json.dump(raw, fh)


def read_template(obj_path, landmarks_path=None, masks_path=None):
    vertices, faces = read_obj(obj_path)
    names, idx = [], np.zeros(0, dtype=np.intp)
    if landmarks_path:
        names, idx = read_template_landmarks(landmarks_path)
    masks = read_region_masks(masks_path, len(vertices)) if masks_path else {}
    return TemplateMesh(
        vertices=vertices, faces=faces, landmark_names=names, landmark_indices=idx,
        region_masks=masks,
    )
