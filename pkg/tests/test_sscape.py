import numpy as np
import pytest

from bodyfit import sscape
from bodyfit.geom import Scan
from bodyfit.nrd import FitError
from bodyfit.skeleton import Pose
from bodyfit.sscape import (ShapeParams, ShapeSpace, fit_to_partial_scans,
                            fit_to_scan, generalized_procrustes, learn,
                            load_space, pca_decompose, reconstruct, save_space)
from conftest import scan_of_body


def principal_angles_deg(A, B):
    qa, _ = np.linalg.qr(A)
    qb, _ = np.linalg.qr(B)
    s = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return np.degrees(np.arccos(np.clip(s, -1, 1)))


class TestPca:
    def test_two_meshes_hand_computed(self):
        rng = np.random.default_rng(0)
        m1, m2 = rng.normal(size=(2, 40, 3)) * 100
        mean = (m1 + m2) / 2
        basis, evals = pca_decompose([m1, m2], mean, 5)
        d = (m1 - m2).reshape(-1) / 2
        assert basis.shape == (120, 1)  # null directions dropped
        assert abs(evals[0] - 2 * d @ d) < 1e-6 * (d @ d)
        cos = abs(basis[:, 0] @ d / np.linalg.norm(d))
        assert abs(cos - 1) < 1e-12

    def test_recovers_generator_subspace(self, gen, space30):
        fields = gen.fields.T  # (3N, dims)
        angles = principal_angles_deg(space30.basis, fields)
        assert angles.max() < 1.0

    def test_training_meshes_reconstruct_exactly(self, gen, corpus30, space30):
        # corpus is exactly rank-3 about its mean, so K=3 captures everything
        aligned, mean = generalized_procrustes(corpus30)
        flat = space30.mean_vertices.reshape(-1)
        for m in aligned[:5]:
            c = space30.basis.T @ (m.reshape(-1) - flat)
            back = flat + space30.basis @ c
            assert np.abs(back - m.reshape(-1)).max() < 1e-6

    def test_component_clamp_warns(self, gen, corpus30):
        with pytest.warns(UserWarning, match="clamping"):
            sp = learn(corpus30[:4], 10, gen.template, gen.joint_schema)
        assert sp.n_components <= 3

    def test_variances_non_increasing(self, space30):
        assert (np.diff(space30.variances) <= 1e-12).all()

    def test_invalid_spaces_rejected(self, gen, space30):
        with pytest.raises(ValueError, match="orthonormal"):
            ShapeSpace(mean_vertices=space30.mean_vertices,
                       basis=space30.basis * 2.0, variances=space30.variances,
                       template=gen.template, skeleton=gen.skeleton,
                       skinning=gen.skinning)
        with pytest.raises(ValueError, match="non-increasing"):
            ShapeSpace(mean_vertices=space30.mean_vertices,
                       basis=space30.basis, variances=space30.variances[::-1].copy(),
                       template=gen.template, skeleton=gen.skeleton,
                       skinning=gen.skinning)


class TestProcrustesAlignment:
    def test_alignment_invariant_to_input_motion(self, corpus30):
        rng = np.random.default_rng(1)
        moved = []
        for m in corpus30[:6]:
            q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
            if np.linalg.det(q) < 0:
                q[:, 0] *= -1
            moved.append(m @ q.T + rng.normal(size=3) * 200)
        a0, mean0 = generalized_procrustes(corpus30[:6])
        a1, mean1 = generalized_procrustes(moved)
        # mean shapes agree up to one global rigid motion
        from bodyfit.align import procrustes, procrustes_residual

        tf = procrustes(mean1, mean0)
        rms = np.sqrt(procrustes_residual(tf, mean1, mean0) / len(mean0))
        assert rms < 1e-6


class TestReconstruct:
    def test_zero_shape_rest_pose_is_mean(self, space30):
        out = reconstruct(space30, ShapeParams.zeros(3),
                          Pose.rest(len(space30.skeleton.joints)))
        assert np.abs(out - space30.mean_vertices).max() < 1e-9

    def test_shape_term_is_linear_in_coefficients(self, space30):
        rng = np.random.default_rng(2)
        rest = Pose.rest(len(space30.skeleton.joints))
        phi = rng.normal(size=3)  # coefficients are in units of sigma
        out = reconstruct(space30, ShapeParams(phi), rest)
        disp = space30.basis @ (phi * np.sqrt(space30.variances))
        expected = space30.mean_vertices + disp.reshape(-1, 3)
        assert np.abs(out - expected).max() < 1e-9


class TestSaveLoad:
    def test_round_trip_equality(self, space30, tmp_path):
        p = tmp_path / "space.bin"
        save_space(p, space30)
        back = load_space(p)
        assert np.array_equal(back.mean_vertices, space30.mean_vertices)
        assert np.array_equal(back.basis, space30.basis)
        assert np.array_equal(back.variances, space30.variances)
        assert back.skeleton.names == space30.skeleton.names
        assert np.array_equal(back.template.faces, space30.template.faces)

    def test_serialization_is_byte_reproducible(self, space30, tmp_path):
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        save_space(a, space30)
        save_space(b, space30)
        assert a.read_bytes() == b.read_bytes()


class TestFitToScan:
    def test_mean_scan_gives_near_zero_coefficients(self, gen, space30):
        rng = np.random.default_rng(3)
        scan = scan_of_body(gen, space30.mean_vertices, rng)
        shape, pose, res = fit_to_scan(space30, scan, max_alternations=5)
        sigma = np.sqrt(space30.variances)
        assert np.abs(shape.coefficients / sigma).max() < 0.05
        assert np.abs(pose.rotations).max() < 0.02

    def test_landmark_only_scan_rejected(self, gen, space30):
        lms = gen.landmarks_of(space30.mean_vertices)
        scan = Scan(points=np.zeros((0, 3)), normals=np.zeros((0, 3)),
                    landmarks=lms, id="lm-only")
        with pytest.raises(FitError, match="no surface samples"):
            fit_to_scan(space30, scan)

    def test_too_few_landmarks_rejected(self, gen, space30):
        scan = Scan(points=space30.mean_vertices.copy(),
                    normals=np.tile([0.0, 0, 1], (space30.n_vertices, 1)),
                    landmarks={}, id="bare")
        with pytest.raises(FitError, match="fewer than 3 landmarks"):
            fit_to_scan(space30, scan)

    def test_single_partial_scan_matches_full_fit(self, gen, space30):
        rng = np.random.default_rng(4)
        body = space30.mean_vertices + (space30.basis @ [8.0, -5.0, 3.0]).reshape(-1, 3)
        scan = scan_of_body(gen, body, rng)
        s1, p1, _ = fit_to_scan(space30, scan, max_alternations=5)
        s2, poses, _ = fit_to_partial_scans(space30, [scan], max_alternations=5)
        surf1 = space30.personalized(s1)
        surf2 = space30.personalized(s2)
        rms = np.sqrt(((surf1 - surf2) ** 2).sum(axis=1).mean())
        assert rms < 1.0
        assert len(poses) == 1

    def test_empty_scan_list_rejected(self, space30):
        with pytest.raises(FitError, match="empty scan list"):
            fit_to_partial_scans(space30, [])
