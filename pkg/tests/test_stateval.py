import numpy as np
import pytest

from bodyfit.sscape import generalized_procrustes, pca_decompose
from bodyfit.stateval import (EvalReport, evaluate, generalization,
                              loo_mean_error, mean_vertex_distance,
                              specificity)


@pytest.fixture(scope="module")
def corpus12(corpus30):
    return corpus30[:12]


class TestGeneralization:
    def test_non_increasing_in_component_count(self, corpus12):
        g = generalization(corpus12, [0, 1, 2, 3, 5])
        vals = [g[k] for k in sorted(g)]
        assert all(b <= a + 1e-9 for a, b in zip(vals, vals[1:]))

    def test_near_zero_once_rank_is_covered(self, corpus12):
        # the synthetic bodies span a 3-dim subspace, so K >= 3 reconstructs
        # each held-out mesh to numerical precision
        g = generalization(corpus12, [3])
        assert g[3] < 1e-6

    def test_k_zero_matches_loo_mean_oracle(self, corpus12):
        g = generalization(corpus12, [0])
        assert abs(g[0] - loo_mean_error(corpus12)) < 1e-12

    def test_component_counts_clamped_with_warning(self, corpus12):
        with pytest.warns(UserWarning, match="clamping"):
            g = generalization(corpus12, [50])
        assert list(g) == [10]

    def test_tiny_corpus_rejected(self, corpus12):
        with pytest.raises(ValueError, match="at least 3"):
            generalization(corpus12[:2], [1])

    def test_reference_corpus_size_checked(self, corpus12):
        with pytest.raises(ValueError, match="size mismatch"):
            generalization(corpus12, [1], reference_corpus=corpus12[:5])


class TestSpecificity:
    def test_matches_brute_force_replay(self, corpus12):
        aligned, mean = generalized_procrustes(corpus12)
        basis, var = pca_decompose(aligned, mean, 3)
        got = specificity(mean, basis, var, aligned, n_samples=50, seed=9, k=3)
        rng = np.random.default_rng(9)
        phi = rng.standard_normal((50, 3))
        stack = np.stack(aligned)
        total = 0.0
        for p in phi:
            s = mean + (basis @ (p * np.sqrt(var))).reshape(-1, 3)
            total += np.linalg.norm(stack - s, axis=2).mean(axis=1).min()
        assert abs(got - total / 50) < 1e-9

    def test_invariant_to_corpus_order(self, corpus12):
        aligned, mean = generalized_procrustes(corpus12)
        basis, var = pca_decompose(aligned, mean, 3)
        a = specificity(mean, basis, var, aligned, n_samples=30, seed=1)
        b = specificity(mean, basis, var, aligned[::-1], n_samples=30, seed=1)
        assert abs(a - b) < 1e-12

    def test_zero_when_corpus_holds_every_sample(self, corpus12):
        aligned, mean = generalized_procrustes(corpus12)
        basis, var = pca_decompose(aligned, mean, 1)
        # k=0 draws collapse to the mean; a corpus containing it scores 0
        got = specificity(mean, basis, var, [mean], n_samples=20, seed=0, k=0)
        assert got == 0.0

    def test_empty_corpus_rejected(self, corpus12):
        aligned, mean = generalized_procrustes(corpus12)
        basis, var = pca_decompose(aligned, mean, 1)
        with pytest.raises(ValueError, match="nonempty"):
            specificity(mean, basis, var, [], n_samples=5)


class TestEvaluate:
    def test_report_round_trips_through_json(self, corpus12):
        rep = evaluate(corpus12, [0, 2, 3], n_samples=20, seeds=(1, 2),
                       reference_name="synthetic")
        back = EvalReport.from_json(rep.to_json())
        assert back.k_list == rep.k_list
        assert back.generalization == rep.generalization
        assert back.specificity == rep.specificity
        assert back.seeds == [1, 2] and back.reference == "synthetic"

    def test_curves_cover_requested_counts(self, corpus12):
        rep = evaluate(corpus12, [0, 1, 3], n_samples=10)
        assert sorted(rep.generalization) == [0, 1, 3]
        assert sorted(rep.specificity) == [0, 1, 3]
        assert rep.corpus_size == 12

    def test_missing_curve_entries_rejected(self):
        with pytest.raises(ValueError, match="missing component count"):
            EvalReport(k_list=[1, 2], generalization={1: 0.0},
                       specificity={1: 0.0, 2: 0.0}, n_samples=1, seeds=[0],
                       corpus_size=3)


def test_mean_vertex_distance_hand_computed():
    a = np.zeros((2, 3))
    b = np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 2.0]])
    assert mean_vertex_distance(a, b) == 3.5
