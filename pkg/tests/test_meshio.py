import numpy as np
import pytest

from bodyfit.geom import GeometryError
from bodyfit.meshio import (read_obj, read_ply, read_region_masks, read_scan,
                            read_scan_landmarks, read_template,
                            read_template_landmarks, write_obj, write_ply,
                            write_region_masks, write_scan_landmarks,
                            write_template_landmarks)


@pytest.fixture()
def tri():
    verts = np.array([[0.0, 0, 0], [100, 0, 0], [0, 100, 0], [0, 0, 100]])
    faces = np.array([[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]])
    return verts, faces


class TestPly:
    def test_round_trip_with_normals_and_faces(self, tri, tmp_path):
        verts, faces = tri
        nrm = np.tile([0.0, 0, 1], (4, 1))
        p = tmp_path / "m.ply"
        write_ply(p, verts, normals=nrm, faces=faces)
        back = read_ply(p)
        assert np.abs(back["points"] - verts).max() < 1e-5  # float32 storage
        assert np.abs(back["normals"] - nrm).max() < 1e-6
        assert np.array_equal(back["faces"], faces)

    def test_points_only(self, tri, tmp_path):
        p = tmp_path / "pts.ply"
        write_ply(p, tri[0])
        back = read_ply(p)
        assert back["points"].shape == (4, 3)
        assert back.get("normals") is None
        assert back.get("faces") is None or len(back["faces"]) == 0

    def test_not_a_ply_rejected(self, tmp_path):
        p = tmp_path / "bad.ply"
        p.write_bytes(b"solid nope")
        with pytest.raises(GeometryError, match="not a PLY"):
            read_ply(p)

    def test_write_is_deterministic(self, tri, tmp_path):
        a, b = tmp_path / "a.ply", tmp_path / "b.ply"
        write_ply(a, tri[0], faces=tri[1])
        write_ply(b, tri[0], faces=tri[1])
        assert a.read_bytes() == b.read_bytes()


class TestObj:
    def test_round_trip(self, tri, tmp_path):
        verts, faces = tri
        p = tmp_path / "m.obj"
        write_obj(p, verts, faces)
        v, f = read_obj(p)
        assert np.abs(v - verts).max() < 1e-9
        assert np.array_equal(f, faces)

    def test_empty_rejected(self, tmp_path):
        p = tmp_path / "e.obj"
        p.write_text("# nothing here\n")
        with pytest.raises(GeometryError, match="no vertices"):
            read_obj(p)


class TestJsonSidecars:
    def test_scan_landmarks_round_trip(self, tmp_path):
        lms = {"nose": np.array([1.0, 2, 3]), "chin": np.array([4.0, 5, 6])}
        p = tmp_path / "lm.json"
        write_scan_landmarks(p, lms)
        back = read_scan_landmarks(p)
        assert sorted(back) == ["chin", "nose"]
        assert np.array_equal(back["nose"], lms["nose"])

    def test_template_landmarks_round_trip(self, tmp_path):
        p = tmp_path / "tl.json"
        write_template_landmarks(p, ["a", "b"], np.array([3, 7]))
        names, idx = read_template_landmarks(p)
        assert names == ["a", "b"]
        assert np.array_equal(idx, [3, 7])

    def test_region_masks_round_trip(self, tmp_path):
        masks = {"head": np.array([True, False, True, False])}
        p = tmp_path / "rm.json"
        write_region_masks(p, masks)
        back = read_region_masks(p, 4)
        assert np.array_equal(back["head"], masks["head"])


class TestScanAndTemplate:
    def test_read_scan_estimates_missing_normals(self, gen, template, tmp_path):
        from bodyfit.synth import sample_surface

        rng = np.random.default_rng(0)
        pts, _ = sample_surface(template.vertices, template.faces, 3000, rng)
        p = tmp_path / "s.ply"
        write_ply(p, pts)
        scan = read_scan(p, id="s")
        assert scan.id == "s"
        assert np.abs(np.linalg.norm(scan.normals, axis=1) - 1).max() < 1e-6

    def test_read_template_bundle(self, gen, template, tmp_path):
        write_obj(tmp_path / "t.obj", template.vertices, template.faces)
        write_template_landmarks(tmp_path / "l.json", template.landmark_names,
                                 template.landmark_indices)
        write_region_masks(tmp_path / "m.json", template.region_masks)
        back = read_template(tmp_path / "t.obj", tmp_path / "l.json",
                             tmp_path / "m.json")
        assert np.abs(back.vertices - template.vertices).max() < 1e-4
        assert back.landmark_names == template.landmark_names
        assert sorted(back.region_masks) == sorted(template.region_masks)
