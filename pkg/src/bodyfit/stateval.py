"""Statistical quality measures for a learned shape space.

Generalization: leave-one-out cross reconstruction of the training corpus.
Specificity: mean distance of random draws from the space to their nearest
training sample. Both are reported per component count K, in mm.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .align import procrustes
from .sscape import generalized_procrustes, pca_decompose


@dataclass
class EvalReport:
    k_list: list[int]
    generalization: dict[int, float]  # K -> mean LOO error, mm
    specificity: dict[int, float]  # K -> mean nearest-neighbor distance, mm
    n_samples: int
    seeds: list[int]
    corpus_size: int
    reference: str | None = None

    def __post_init__(self):
        for k in self.k_list:
            if k not in self.generalization or k not in self.specificity:
                raise ValueError(f"curves missing component count {k}")

    def to_json(self):
        return json.dumps({
            "k_list": list(self.k_list),
            "generalization_mm": {str(k): v for k, v in self.generalization.items()},
            "specificity_mm": {str(k): v for k, v in self.specificity.items()},
            "n_samples": self.n_samples,
            "seeds": list(self.seeds),
            "corpus_size": self.corpus_size,
            "reference": self.reference,
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(
            k_list=d["k_list"],
            generalization={int(k): v for k, v in d["generalization_mm"].items()},
            specificity={int(k): v for k, v in d["specificity_mm"].items()},
            n_samples=d["n_samples"],
            seeds=d["seeds"],
            corpus_size=d["corpus_size"],
            reference=d.get("reference"),
        )


def mean_vertex_distance(a, b):
    """Mean per-vertex Euclidean distance between two meshes (mm)."""
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b), axis=1).mean())


def _clamped(k_list, corpus_size):
    """Component counts usable with leave-one-out PCA on this corpus."""
    k_max = corpus_size - 2  # LOO corpus has size-1 samples, rank size-2
    out = []
    for k in k_list:
        if k > k_max:
            warnings.warn(f"clamping component count {k} -> {k_max} "
                          f"(corpus size {corpus_size})")
            k = k_max
        out.append(int(k))
    return out


def generalization(corpus, k_list, reference_corpus=None):
    """Leave-one-out reconstruction error of the corpus, per component count.

    For each held-out mesh: build a PCA space from the remaining meshes,
    rigid-align the held-out mesh to the leave-one-out mean, project it onto
    the top-K basis (closed-form least squares: the mesh is already in
    correspondence), and measure the mean vertex distance of the
    reconstruction against the reference mesh when given, else against the
    held-out mesh itself. Returns {K: mean error over all held-out meshes}.
    """
    meshes = [np.asarray(m, dtype=np.float64) for m in corpus]
    if len(meshes) < 3:
        raise ValueError("generalization needs a corpus of at least 3 meshes")
    if reference_corpus is not None and len(reference_corpus) != len(meshes):
        raise ValueError("reference corpus size mismatch")
    ks = _clamped(k_list, len(meshes))
    k_top = max(ks)
    errors = {k: [] for k in ks}
    for i in range(len(meshes)):
        rest = meshes[:i] + meshes[i + 1:]
        aligned, mean = generalized_procrustes(rest)
        basis, _ = pca_decompose(aligned, mean, k_top)
        held = procrustes(meshes[i], mean, with_scale=False).apply(meshes[i])
        coeff = basis.T @ (held - mean).reshape(-1)
        truth = held
        if reference_corpus is not None:
            ref = np.asarray(reference_corpus[i], dtype=np.float64)
            truth = procrustes(ref, held, with_scale=False).apply(ref)
        for k in ks:
            kk = min(k, basis.shape[1])
            recon = mean + (basis[:, :kk] @ coeff[:kk]).reshape(-1, 3)
            errors[k].append(mean_vertex_distance(recon, truth))
    return {k: float(np.mean(errors[k])) for k in ks}


def loo_mean_error(corpus):
    """Mean distance of each mesh to its leave-one-out mean (the K=0 case)."""
    meshes = [np.asarray(m, dtype=np.float64) for m in corpus]
    errs = []
    for i in range(len(meshes)):
        rest = meshes[:i] + meshes[i + 1:]
        _, mean = generalized_procrustes(rest)
        held = procrustes(meshes[i], mean, with_scale=False).apply(meshes[i])
        errs.append(mean_vertex_distance(held, mean))
    return float(np.mean(errs))


def specificity(mean_vertices, basis, variances, corpus, n_samples=10_000,
                seed=0, k=None):
    """Mean distance of random shape-space draws to the nearest corpus mesh.

    Draws ``n_samples`` coefficient vectors from Normal(0, I) in sigma-scaled
    units, reconstructs each at the canonical posture, and averages the
    distance (mean per-vertex Euclidean) to its nearest neighbor in the
    corpus. Brute-force search; corpus sizes here are small.
    """
    if len(corpus) == 0:
        raise ValueError("specificity needs a nonempty corpus")
    mean_vertices = np.asarray(mean_vertices, dtype=np.float64)
    basis = np.asarray(basis, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    if k is None:
        k = basis.shape[1]
    k = min(int(k), basis.shape[1])
    stack = np.stack([np.asarray(m, dtype=np.float64) for m in corpus])
    rng = np.random.default_rng(seed)
    phi = rng.standard_normal((n_samples, k))
    total = 0.0
    for p in phi:
        sample = mean_vertices + (basis[:, :k] @ (p * np.sqrt(variances[:k]))).reshape(-1, 3)
        d = np.linalg.norm(stack - sample, axis=2).mean(axis=1)
        total += float(d.min())
    return total / n_samples


def evaluate(corpus, k_list, n_samples=1000, seeds=(7,), reference_corpus=None,
             reference_name=None) -> EvalReport:
    """Both curves over ``k_list``; specificity averaged over ``seeds``."""
    meshes = [np.asarray(m, dtype=np.float64) for m in corpus]
    ks = _clamped(k_list, len(meshes))
    gen = generalization(meshes, ks, reference_corpus=reference_corpus)
    aligned, mean = generalized_procrustes(meshes)
    basis, variances = pca_decompose(aligned, mean, max(ks))
    spec = {}
    for k in ks:
        vals = [specificity(mean, basis, variances, aligned,
                            n_samples=n_samples, seed=s, k=k) for s in seeds]
        spec[k] = float(np.mean(vals))
    return EvalReport(
        k_list=ks,
        generalization=gen,
        specificity=spec,
        n_samples=n_samples,
        seeds=list(seeds),
        corpus_size=len(meshes),
        reference=reference_name,
    )
