"""Parity between the compiled kernel and its pure-numpy twin."""

import numpy as np
import pytest

from bodyfit import _kernels_py

try:
    from bodyfit import _kernels as _compiled
except ImportError:  # pragma: no cover - fallback-only environments
    _compiled = None

needs_compiled = pytest.mark.skipif(_compiled is None,
                                    reason="compiled extension not built")


def random_instance(rng, n=25, n_edges=40, n_lm=4):
    A = np.eye(3, 4).reshape(12) + 0.2 * rng.normal(size=(n, 12))
    P = rng.normal(size=(n, 3)) * 100
    corr = P + rng.normal(size=(n, 3)) * 5
    wa = rng.uniform(0, 1, size=n)
    edges = rng.integers(0, n, size=(n_edges, 2)).astype(np.intp)
    edges = edges[edges[:, 0] != edges[:, 1]]
    lm_idx = rng.choice(n, size=n_lm, replace=False).astype(np.intp)
    lm_target = rng.normal(size=(n_lm, 3)) * 100
    return (np.ascontiguousarray(A), np.ascontiguousarray(P),
            np.ascontiguousarray(corr), wa, np.ascontiguousarray(edges),
            float(rng.uniform(0.1, 10)), lm_idx,
            np.ascontiguousarray(lm_target), float(rng.uniform(0.01, 1)))


@needs_compiled
def test_energy_and_gradient_agree_on_random_instances():
    rng = np.random.default_rng(11)
    for _ in range(20):
        args = random_instance(rng)
        e_c, g_c = _compiled.energy_grad(*args)
        e_p, g_p = _kernels_py.energy_grad(*args)
        scale = max(1.0, abs(e_p))
        assert abs(e_c - e_p) < 1e-9 * scale
        gs = max(1.0, np.abs(g_p).max())
        assert np.abs(g_c - g_p).max() < 1e-9 * gs


@needs_compiled
def test_agree_with_empty_landmarks_and_edges():
    rng = np.random.default_rng(12)
    A, P, corr, wa, _, beta, _, _, gamma = random_instance(rng)
    edges = np.zeros((0, 2), dtype=np.intp)
    lm_idx, lm_target = np.zeros(0, dtype=np.intp), np.zeros((0, 3))
    e_c, g_c = _compiled.energy_grad(A, P, corr, wa, edges, beta, lm_idx, lm_target, gamma)
    e_p, g_p = _kernels_py.energy_grad(A, P, corr, wa, edges, beta, lm_idx, lm_target, gamma)
    assert abs(e_c - e_p) < 1e-9 * max(1.0, abs(e_p))
    assert np.abs(g_c - g_p).max() < 1e-9


def test_pure_backend_selected_by_env(tmp_path):
    import subprocess
    import sys

    out = subprocess.run(
        [sys.executable, "-c",
         "import bodyfit.nrd as n; print(n.KERNEL_BACKEND)"],
        env={"PATH": "/usr/bin:/bin", "BODYFIT_PURE_PYTHON": "1"},
        capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "python"


def test_backend_names():
    assert _kernels_py.BACKEND == "python"
    if _compiled is not None:
        assert _compiled.BACKEND == "cython"
