import numpy as np
import pytest

from bodyfit.skeleton import (Pose, Skeleton, SkeletonError, SkinningWeights,
                              compute_skinning_weights, exp_rotation,
                              fit_skeleton, global_joint_transforms,
                              log_rotation, skin)
from scipy import sparse


def two_bone_schema():
    return [
        {"name": "root", "parent": None, "anchor_idx": [0], "anchor_w": [1.0]},
        {"name": "mid", "parent": 0, "anchor_idx": [1, 2], "anchor_w": [0.5, 0.5]},
        {"name": "tip", "parent": 1, "anchor_idx": [3], "anchor_w": [1.0]},
    ]


def chain_vertices():
    return np.array([[0.0, 0, 0], [100, 0, 0], [100, 0, 10], [200, 0, 5]])


class TestFitSkeleton:
    def test_anchor_positions(self):
        sk = fit_skeleton(chain_vertices(), two_bone_schema())
        pos = sk.joint_positions(chain_vertices())
        assert np.array_equal(pos[0], [0, 0, 0])
        assert np.array_equal(pos[1], [100, 0, 5])  # 50/50 anchor blend
        assert np.array_equal(pos[2], [200, 0, 5])

    def test_scales_with_mesh(self):
        sk = fit_skeleton(chain_vertices(), two_bone_schema())
        pos = sk.joint_positions(chain_vertices() * 1.1)
        assert np.abs(pos - 1.1 * sk.joint_positions(chain_vertices())).max() < 1e-12

    def test_json_round_trip(self):
        sk = fit_skeleton(chain_vertices(), two_bone_schema())
        back = Skeleton.from_json(sk.to_json())
        assert back.names == sk.names
        assert np.array_equal(back.joint_positions(chain_vertices()),
                              sk.joint_positions(chain_vertices()))

    def test_cycle_rejected(self):
        bad = two_bone_schema()
        bad[0]["parent"] = 2
        with pytest.raises(SkeletonError):
            fit_skeleton(chain_vertices(), bad)

    def test_two_roots_rejected(self):
        bad = two_bone_schema()
        bad[1]["parent"] = None
        with pytest.raises(SkeletonError, match="one root"):
            fit_skeleton(chain_vertices(), bad)

    def test_bad_anchor_weights_rejected(self):
        bad = two_bone_schema()
        bad[1]["anchor_w"] = [0.5, 0.4]
        with pytest.raises(SkeletonError, match="sum 1"):
            fit_skeleton(chain_vertices(), bad)


class TestRotationMaps:
    def test_exp_log_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            r = rng.normal(size=3)
            r *= rng.uniform(0, 3.0) / np.linalg.norm(r)
            back = log_rotation(exp_rotation(r))
            assert np.abs(back - r).max() < 1e-8

    def test_exp_is_rotation(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            R = exp_rotation(rng.normal(size=3))
            assert np.abs(R @ R.T - np.eye(3)).max() < 1e-12
            assert abs(np.linalg.det(R) - 1) < 1e-12

    def test_zero_is_identity(self):
        assert np.array_equal(exp_rotation(np.zeros(3)), np.eye(3))
        assert np.array_equal(log_rotation(np.eye(3)), np.zeros(3))

    def test_near_pi_round_trip(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            r = (np.pi - 1e-8) * axis
            R = exp_rotation(r)
            assert np.abs(exp_rotation(log_rotation(R)) - R).max() < 1e-6


class TestSkinning:
    def test_rest_pose_is_identity(self, gen, template):
        posed = skin(template.vertices, gen.skeleton, gen.skinning,
                     Pose.rest(len(gen.skeleton.joints)))
        assert np.abs(posed - template.vertices).max() < 1e-9

    def test_global_rigid_motion_moves_every_vertex_exactly(self, gen, template):
        n = len(gen.skeleton.joints)
        r = np.array([0.1, -0.3, 0.2])
        t = np.array([25.0, -10.0, 40.0])
        pose = Pose(rotations=np.vstack([r, np.zeros((n - 1, 3))]),
                    root_translation=t)
        posed = skin(template.vertices, gen.skeleton, gen.skinning, pose)
        root_p = gen.skeleton.joint_positions(template.vertices)[gen.skeleton.root]
        R = exp_rotation(r)
        expected = (template.vertices - root_p) @ R.T + root_p + t
        assert np.abs(posed - expected).max() < 1e-9

    def test_weights_sum_one_and_bone_budget(self, gen):
        W = gen.skinning.matrix
        rowsum = np.asarray(W.sum(axis=1)).ravel()
        assert np.abs(rowsum - 1).max() < 1e-9
        assert np.diff(W.indptr).max() <= 4

    def test_computed_weights_validate(self, gen, template):
        w = compute_skinning_weights(template.vertices, gen.skeleton,
                                     faces=template.faces)
        assert w.matrix.shape == (len(template.vertices), len(gen.skeleton.joints))

    def test_invalid_weight_matrices_rejected(self):
        with pytest.raises(SkeletonError, match="sum to 1"):
            SkinningWeights(sparse.csr_matrix(np.full((2, 3), 0.5)))
        with pytest.raises(SkeletonError, match="at most 4"):
            SkinningWeights(sparse.csr_matrix(np.full((2, 5), 0.2)))
        with pytest.raises(SkeletonError, match="nonnegative"):
            SkinningWeights(sparse.csr_matrix(np.array([[1.5, -0.5, 0.0]])))

    def test_child_rotation_composes_through_parent(self):
        verts = chain_vertices()
        sk = fit_skeleton(verts, two_bone_schema())
        pose = Pose(rotations=np.array([[0, 0, 0.3], [0, 0, 0.4], [0, 0, 0]]))
        Rs, _ = global_joint_transforms(sk, sk.joint_positions(verts), pose)
        expected = exp_rotation([0, 0, 0.3]) @ exp_rotation([0, 0, 0.4])
        assert np.abs(Rs[1] - expected).max() < 1e-12

    def test_pose_vector_round_trip(self):
        rng = np.random.default_rng(3)
        pose = Pose(rotations=rng.normal(size=(5, 3)),
                    root_translation=rng.normal(size=3))
        back = Pose.from_vector(pose.as_vector(), 5)
        assert np.array_equal(back.rotations, pose.rotations)
        assert np.array_equal(back.root_translation, pose.root_translation)
