import numpy as np
import pytest
import sympy as sp

from pcinv.forward import _q_shift
from pcinv.kernel_operator import assemble_operator, density_estimate, kernel_matrix
from pcinv.pointcloud import PointCloud, generate_ellipse, generate_torus, pairwise_sq_dists
from pcinv.prior import self_tuning_laplacian
from pcinv.truth import (
    TruthError,
    add_noise,
    chart_weighted_mean,
    cow_truth,
    ellipse_source,
    ellipse_truth,
    hierarchical_truth,
    relative_error,
    relative_noise_level,
    solve_ellipse_1d,
    torus_source,
    torus_truth,
)


def sympy_divergence_source(coords, metric_diag, kappa, u):
    """-(1/sqrt|g|) sum_i d_i(sqrt|g| kappa g^{ii} d_i u) for a diagonal metric."""
    sqrt_g = sp.sqrt(sp.Mul(*metric_diag))
    expr = sum(sp.diff(sqrt_g * kappa / gii * sp.diff(u, x), x) for x, gii in zip(coords, metric_diag))
    return sp.lambdify(coords, -expr / sqrt_g, "numpy")


class TestEllipseTruth:
    def test_source_matches_sympy(self):
        w = sp.symbols("w")
        a = 3
        f = sympy_divergence_source([w], [sp.sin(w) ** 2 + a**2 * sp.cos(w) ** 2], 2 + sp.cos(w), sp.cos(w))
        truth = ellipse_truth(400, 3.0)
        grid = generate_ellipse(400, 3.0).params[:, 0]
        np.testing.assert_allclose(truth.f, f(grid), rtol=0, atol=1e-12)

    def test_fields(self):
        truth = ellipse_truth(400, 3.0)
        w = generate_ellipse(400, 3.0).params[:, 0]
        np.testing.assert_allclose(truth.kappa_true, 2 + np.cos(w))
        np.testing.assert_allclose(truth.u_true, np.cos(w))
        assert truth.meta["fd_rel_err"] <= 1e-6

    def test_source_and_solution_have_zero_mean(self):
        truth = ellipse_truth(400, 3.0)
        pc = generate_ellipse(400, 3.0)
        assert abs(chart_weighted_mean(truth.f, pc)) <= 1e-12
        assert abs(chart_weighted_mean(truth.u_true, pc)) <= 1e-12

    def test_fd_check_catches_wrong_sign(self):
        from pcinv.truth import _check_fd

        w = np.linspace(0, 6, 50)
        f = ellipse_source(w, 3.0, 2 + np.cos(w), -np.sin(w), np.cos(w), -np.sin(w), -np.cos(w))
        with pytest.raises(TruthError):
            _check_fd(-f, f, "flipped")


class TestTorusTruth:
    def test_source_matches_sympy(self):
        w1, w2 = sp.symbols("w1 w2")
        f = sympy_divergence_source([w1, w2], [sp.Integer(1), (2 + sp.cos(w1)) ** 2],
                                    2 + sp.sin(w1) * sp.sin(w2), sp.sin(w1) * sp.sin(w2))
        pc = generate_torus(20, 20)
        np.testing.assert_allclose(torus_source(pc.params[:, 0], pc.params[:, 1]),
                                   f(pc.params[:, 0], pc.params[:, 1]), atol=1e-12)

    def test_zero_mean(self):
        truth = torus_truth(20, 20)
        pc = generate_torus(20, 20)
        assert abs(chart_weighted_mean(truth.f, pc)) <= 1e-12
        assert abs(chart_weighted_mean(truth.u_true, pc)) <= 1e-12


class TestReferenceSolve:
    def test_recovers_analytic_solution(self):
        a = 3.0
        kfn = lambda w: 2 + np.cos(w)
        ffn = lambda w: ellipse_source(w, a, kfn(w), -np.sin(w), np.cos(w), -np.sin(w), -np.cos(w))
        w, u = solve_ellipse_1d(kfn, ffn, 256, a)
        np.testing.assert_allclose(u, np.cos(w), atol=1e-10)

    def test_rejects_nonzero_mean_source(self):
        with pytest.raises(TruthError):
            solve_ellipse_1d(lambda w: np.ones_like(w), lambda w: np.ones_like(w), 64)

    def test_residual_of_fine_solution(self):
        # the returned u satisfies the flux equation to spectral accuracy
        a, N = 3.0, 512
        kfn = lambda w: np.exp(np.cos(5 * w))
        w, u = solve_ellipse_1d(kfn, lambda w: 0.2 * np.sin(w), N, a)
        k = np.fft.fftfreq(N, 1.0 / N)
        d = lambda v: np.real(np.fft.ifft(1j * k * np.fft.fft(v)))
        sg = np.sqrt(np.sin(w) ** 2 + a * a * np.cos(w) ** 2)
        lhs = -d(kfn(w) * d(u) / sg) / sg
        np.testing.assert_allclose(lhs, 0.2 * np.sin(w), atol=1e-8)

    @pytest.mark.parametrize("freq,level", [(1, 1.87), (5, 1.26), (8, 1.27)])
    def test_noise_levels_match_published(self, freq, level):
        truth = hierarchical_truth(100, freq)
        assert relative_noise_level(0.01, truth.u_true) == pytest.approx(level, abs=0.006)

    def test_deterministic(self):
        a, b = hierarchical_truth(100, 5), hierarchical_truth(100, 5)
        assert np.array_equal(a.u_true, b.u_true) and np.array_equal(a.f, b.f)


@pytest.fixture(scope="module")
def ellipsoid_cloud():
    r = np.random.default_rng(0)
    v = r.normal(size=(300, 3))
    v /= np.linalg.norm(v, axis=1)[:, None]
    pc = PointCloud(v * np.array([1.0, 1.5, 0.7]), 2)
    D2 = pairwise_sq_dists(pc)
    return pc, D2, self_tuning_laplacian(pc, 20, D2)


class TestCowTruth:
    def test_construction(self, ellipsoid_cloud):
        pc, D2, gl = ellipsoid_cloud
        eps = 0.05
        truth, sub, idx, extras = cow_truth(pc, gl, 0.7, 6, eps, seed=3, n_sub=120, sub_seed=4,
                                            sq_dists_full=D2)
        assert sub.n == 120 and len(np.unique(idx)) == 120
        kappa_full = np.exp(extras["theta_full"])
        np.testing.assert_allclose(truth.kappa_true, kappa_full[idx])
        op = assemble_operator(pc, kappa_full, eps, D2)
        np.testing.assert_allclose(extras["f_full"], op.L @ (10 * gl.eigvecs[:, 1]), rtol=1e-12)
        np.testing.assert_array_equal(truth.f, extras["f_full"][idx])
        q_sub = density_estimate(kernel_matrix(D2[np.ix_(idx, idx)], eps), eps, 2)
        assert abs(np.sum(truth.u_true / q_sub)) <= 1e-10 * np.sum(np.abs(truth.u_true) / q_sub)
        np.testing.assert_allclose(truth.u_true, _q_shift(10 * gl.eigvecs[idx, 1], q_sub))

    def test_deterministic(self, ellipsoid_cloud):
        pc, D2, gl = ellipsoid_cloud
        a = cow_truth(pc, gl, 0.7, 6, 0.05, seed=3, n_sub=100, sq_dists_full=D2)[0]
        b = cow_truth(pc, gl, 0.7, 6, 0.05, seed=3, n_sub=100, sq_dists_full=D2)[0]
        assert np.array_equal(a.kappa_true, b.kappa_true) and np.array_equal(a.u_true, b.u_true)


class TestMetrics:
    def test_relative_error_examples(self, rng):
        t = rng.normal(size=10)
        assert relative_error(t, t) == 0.0
        assert relative_error(1.01 * t, t) == pytest.approx(1.0, rel=1e-12)
        e = rng.normal(size=10)
        oracle = 100 * np.sqrt(sum((e[i] - t[i]) ** 2 for i in range(10))) / np.sqrt(sum(x * x for x in t))
        assert relative_error(e, t) == pytest.approx(oracle, rel=1e-12)

    def test_relative_error_zero_truth(self):
        with pytest.raises(ValueError):
            relative_error(np.ones(3), np.zeros(3))

    def test_ellipse_noise_level(self):
        assert relative_noise_level(0.01, ellipse_truth(400, 3.0).u_true) == pytest.approx(1.41, abs=0.005)

    def test_add_noise(self):
        clean = np.arange(5.0)
        a = add_noise(clean, 0.1, np.random.default_rng(2))
        b = add_noise(clean, 0.1, np.random.default_rng(2))
        assert np.array_equal(a, b) and not np.array_equal(a, clean)
        np.testing.assert_array_equal(add_noise(clean, 0.0, np.random.default_rng(0)), clean)
        with pytest.raises(ValueError):
            add_noise(clean, -1.0, np.random.default_rng(0))

    def test_truth_requires_positive_kappa(self):
        from pcinv.truth import SyntheticTruth

        with pytest.raises(TruthError):
            SyntheticTruth(np.array([1.0, -1.0]), np.zeros(2), np.zeros(2))
