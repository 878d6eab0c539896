import numpy as np
import pytest

from bodyfit.geom import GeometryError, Scan, TemplateMesh
from bodyfit.nrd import (AffineField, FitError, NrdConfig, NrdWeights, energy,
                         fit, fitting_error)


def plane_grid(nx=6, ny=6, spacing=50.0):
    xs, ys = np.meshgrid(np.arange(nx) * spacing, np.arange(ny) * spacing)
    verts = np.column_stack([xs.ravel(), ys.ravel(), np.zeros(nx * ny)])
    faces = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            a = j * nx + i
            faces.extend([(a, a + 1, a + nx), (a + 1, a + nx + 1, a + nx)])
    corners = [0, nx - 1, nx * ny - nx, nx * ny - 1]
    return TemplateMesh(
        vertices=verts, faces=np.array(faces),
        landmark_names=[f"c{k}" for k in range(4)],
        landmark_indices=np.array(corners),
    )


def scan_of_template(tm, offset=0.0):
    nrm = np.tile([0.0, 0, 1], (tm.n_vertices, 1))
    pts = tm.vertices + offset * nrm
    lms = {name: pts[vi] for name, vi in zip(tm.landmark_names, tm.landmark_indices)}
    return Scan(points=pts, normals=nrm, landmarks=lms, id="plane")


class TestAffineField:
    def test_identity_is_noop(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(7, 3))
        assert np.abs(AffineField.identity(7).apply(pts) - pts).max() == 0

    def test_initial_vertices_round_trip(self):
        rng = np.random.default_rng(1)
        P, X = rng.normal(size=(9, 3)), rng.normal(size=(9, 3))
        f = AffineField.from_initial_vertices(P, X)
        assert np.abs(f.apply(P) - X).max() < 1e-12

    def test_bad_shape_and_nan_rejected(self):
        with pytest.raises(GeometryError):
            AffineField(np.zeros((3, 4)))
        bad = np.zeros((2, 3, 4))
        bad[0, 0, 0] = np.nan
        with pytest.raises(GeometryError):
            AffineField(bad)


class TestEnergy:
    def test_zero_at_perfect_fit(self):
        tm = plane_grid()
        scan = scan_of_template(tm)
        f = AffineField.identity(tm.n_vertices)
        e, grad = energy(f, tm, scan, np.arange(tm.n_vertices),
                         np.ones(tm.n_vertices), NrdWeights())
        assert e == 0.0
        assert np.abs(grad).max() == 0.0

    def test_hand_computed_single_displacement(self):
        # triangle template, vertex 0 displaced by t: data |t|^2, two incident
        # edges contribute 2*beta*|t|^2, one landmark at vertex 0 adds gamma*|t|^2
        tm = TemplateMesh(vertices=np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]),
                          faces=np.array([[0, 1, 2]]),
                          landmark_names=["a"], landmark_indices=np.array([0]))
        scan = Scan(points=tm.vertices.copy(),
                    normals=np.tile([0.0, 0, 1], (3, 1)),
                    landmarks={"a": tm.vertices[0].copy()}, id="tri")
        f = AffineField.identity(3)
        t = np.array([1.0, 2.0, 3.0])
        f.transforms[0, :, 3] = t
        w = NrdWeights(alpha=1.0, beta=0.5, gamma=0.25)
        e, _ = energy(f, tm, scan, np.arange(3), np.ones(3), w)
        tt = t @ t  # 14
        assert abs(e - (tt + 2 * w.beta * tt + w.gamma * tt)) < 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        tm = plane_grid(4, 4)
        n = tm.n_vertices
        scan = scan_of_template(tm, offset=3.0)
        f = AffineField(np.tile(np.eye(3, 4), (n, 1, 1)) + 0.05 * rng.normal(size=(n, 3, 4)))
        w = NrdWeights(alpha=1.0, beta=2.0, gamma=0.7)
        idx = rng.integers(0, n, size=n)
        cw = rng.uniform(0.2, 1.0, size=n)
        e0, grad = energy(f, tm, scan, idx, cw, w)
        h = 1e-6
        for _ in range(40):
            i, r, c = rng.integers(n), rng.integers(3), rng.integers(4)
            fp = AffineField(f.transforms.copy())
            fp.transforms[i, r, c] += h
            fm = AffineField(f.transforms.copy())
            fm.transforms[i, r, c] -= h
            ep, _ = energy(fp, tm, scan, idx, cw, w)
            em, _ = energy(fm, tm, scan, idx, cw, w)
            fd = (ep - em) / (2 * h)
            assert abs(grad[i, r, c] - fd) < 1e-5 * max(1.0, abs(fd))

    def test_frozen_vertices_have_no_data_gradient(self):
        tm = plane_grid(4, 4)
        n = tm.n_vertices
        scan = scan_of_template(tm, offset=5.0)
        frozen = np.zeros(n, dtype=bool)
        frozen[:4] = True
        f = AffineField.identity(n)
        w = NrdWeights(alpha=1.0, beta=0.0, gamma=0.0)
        _, grad = energy(f, tm, scan, np.arange(n), np.ones(n), w,
                         frozen_mask=frozen)
        assert np.abs(grad[:4]).max() == 0.0
        assert np.abs(grad[4:]).max() > 0.0

    def test_smoothness_invariant_to_global_affine(self):
        # constant field => every edge difference is zero regardless of content
        rng = np.random.default_rng(6)
        tm = plane_grid(5, 5)
        n = tm.n_vertices
        f = AffineField(np.tile(rng.normal(size=(3, 4)), (n, 1, 1)))
        scan = scan_of_template(tm)
        w = NrdWeights(alpha=0.0, beta=1e6, gamma=0.0)
        e, _ = energy(f, tm, scan, np.arange(n), np.ones(n), w)
        assert e == 0.0


class TestFit:
    def test_annealing_schedule_counts_and_final_beta(self):
        tm = plane_grid()
        res = fit(tm, scan_of_template(tm))
        betas = [step["beta"] for step in res.energy_trace]
        # one smoothness-only pass, then data iterations decaying by 0.25
        assert res.energy_trace[0]["alpha"] == 0.0
        assert all(step["alpha"] == 1.0 for step in res.energy_trace[1:])
        assert betas == [1e6, 1e6, 2.5e5, 62500.0, 15625.0, 3906.25, 976.5625]
        assert res.summary["final_beta"] == 976.5625
        assert res.summary["outer_iterations"] == 7

    def test_self_fit_is_tight(self):
        tm = plane_grid()
        res = fit(tm, scan_of_template(tm))
        assert res.summary["valid_fraction"] == 1.0
        assert res.summary["mean_error"] < 0.1

    def test_smoothness_only_solve_yields_constant_field(self):
        # with the data and landmark terms off, the smoothness term alone
        # drives every per-vertex transform to a common value
        from bodyfit.nrd import _inner_solve

        rng = np.random.default_rng(7)
        tm = plane_grid(4, 4)
        n = tm.n_vertices
        A0 = np.tile(np.eye(3, 4).reshape(12), (n, 1)) + 0.1 * rng.normal(size=(n, 12))
        A, _ = _inner_solve(A0, tm, np.zeros((n, 3)), np.zeros(n),
                            np.zeros(0, dtype=np.intp), np.zeros((0, 3)),
                            1.0, 0.0, NrdConfig(inner_max_iter=2000, inner_tol=1e-15))
        assert np.abs(A - A.mean(axis=0)).max() < 1e-6

    def test_initialization_too_far_raises(self):
        tm = plane_grid()
        scan = scan_of_template(tm)
        far = Scan(points=scan.points + 1000.0, normals=scan.normals, id="far")
        with pytest.raises(FitError, match="no compatible points"):
            fit(tm, far)

    def test_unknown_frozen_region_rejected(self):
        tm = plane_grid()
        cfg = NrdConfig(frozen_regions=("hands",))
        with pytest.raises(GeometryError, match="hands"):
            fit(tm, scan_of_template(tm), config=cfg)

    def test_deterministic(self):
        tm = plane_grid()
        scan = scan_of_template(tm, offset=2.0)
        a = fit(tm, scan)
        b = fit(tm, scan)
        assert np.array_equal(a.deformed_vertices, b.deformed_vertices)

    def test_recovers_small_warp(self):
        tm = plane_grid(8, 8)
        warped = tm.vertices.copy()
        warped[:, 2] += 10.0 * np.sin(warped[:, 0] / 200.0)
        nrm = np.tile([0.0, 0, 1], (tm.n_vertices, 1))
        lms = {name: warped[vi]
               for name, vi in zip(tm.landmark_names, tm.landmark_indices)}
        scan = Scan(points=warped, normals=nrm, landmarks=lms, id="warp")
        res = fit(tm, scan)
        assert res.summary["mean_error"] < 1.0


class TestFittingError:
    def test_offset_plane_reads_exact_distance(self):
        tm = plane_grid()
        scan = scan_of_template(tm, offset=7.0)
        err, summary = fitting_error(tm.vertices, tm.faces, scan)
        assert np.abs(err - 7.0).max() < 1e-9
        assert summary["valid_fraction"] == 1.0
        assert abs(summary["mean_error"] - 7.0) < 1e-9
        curve = dict(zip(summary["cumulative_thresholds_mm"],
                         summary["cumulative_proportion_below"]))
        assert curve[6.0] == 0.0 and curve[7.0] == 1.0

    def test_matches_brute_force_nearest(self):
        rng = np.random.default_rng(8)
        tm = plane_grid()
        pts = tm.vertices + rng.normal(scale=3.0, size=(tm.n_vertices, 3))
        nrm = np.tile([0.0, 0, 1], (len(pts), 1))
        scan = Scan(points=pts, normals=nrm, id="jit")
        err, _ = fitting_error(tm.vertices, tm.faces, scan)
        brute = np.linalg.norm(tm.vertices[:, None] - pts[None], axis=2).min(axis=1)
        ok = ~np.isnan(err)
        assert ok.any()
        assert np.abs(err[ok] - brute[ok]).max() < 1e-12

    def test_distant_vertices_marked_invalid(self):
        tm = plane_grid()
        scan = scan_of_template(tm, offset=200.0)  # beyond the 50 mm gate
        err, summary = fitting_error(tm.vertices, tm.faces, scan)
        assert np.isnan(err).all()
        assert summary["valid_fraction"] == 0.0
        assert np.isnan(summary["mean_error"])
