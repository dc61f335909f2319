import math

import numpy as np
import pytest

from pcinv.forward import SolverError
from pcinv.mcmc import (
    ChainState,
    ChainTrace,
    Likelihood,
    NormalHyperprior,
    SamplerConfig,
    SamplerConfigError,
    log_likelihood,
    map_estimate,
    pcn_step,
    posterior_summary,
    read_trace_csv,
    run_gibbs,
    run_pcn,
    tau_log_ratio,
    tau_step,
)
from pcinv.pointcloud import PointCloud, generate_ellipse
from pcinv.prior import GraphLaplacian, build_prior, prior_logdensity_terms, self_tuning_laplacian

from conftest import random_cloud


def const_lik(n, J=3):
    return Likelihood(np.zeros(J), lambda th: np.zeros(J), sigma=1.0)


def toy_gl(n, seed=0):
    return self_tuning_laplacian(random_cloud(n, seed=seed), 1)


def nonlinear_lik(n, seed=0):
    r = np.random.default_rng(seed)
    A = r.normal(size=(2, n))
    return Likelihood(np.array([0.5, -0.2]), lambda th: np.tanh(A @ np.exp(0.5 * th)), sigma=0.3)


def gaussian_logpdf(x, mean, C):
    d = x - mean
    return -0.5 * d @ np.linalg.solve(C, d) - 0.5 * np.linalg.slogdet(C)[1]


class TestLikelihood:
    def test_exact_fit(self):
        lik = Likelihood(np.array([1.0, 2.0]), None, sigma=0.1)
        assert log_likelihood(lik, np.array([1.0, 2.0])) == 0.0

    def test_diagonal(self):
        lik = Likelihood(np.zeros(2), None, sigma=0.1)
        assert log_likelihood(lik, np.array([0.1, 0.1])) == pytest.approx(-1.0, rel=1e-14)

    def test_full_covariance(self, rng):
        B = rng.normal(size=(3, 3))
        G = B @ B.T + 3 * np.eye(3)
        y, g = rng.normal(size=3), rng.normal(size=3)
        lik = Likelihood(y, None, Gamma=G)
        r = y - g
        assert log_likelihood(lik, g) == pytest.approx(-0.5 * r @ np.linalg.inv(G) @ r, rel=1e-12)

    def test_invalid(self):
        with pytest.raises(ValueError):
            Likelihood(np.zeros(2), None)
        with pytest.raises(ValueError):
            Likelihood(np.zeros(2), None, sigma=-1.0)
        with pytest.raises(ValueError):
            Likelihood(np.zeros(2), None, Gamma=-np.eye(2))

    def test_callable(self):
        lik = Likelihood(np.ones(2), lambda th: th[:2], sigma=1.0)
        assert lik(np.array([1.0, 1.0, 5.0])) == 0.0


class TestPcnStep:
    def test_constant_likelihood_always_accepts(self):
        prior = build_prior(toy_gl(5), 0.5, 2)
        lik = const_lik(5)
        r = np.random.default_rng(0)
        state = ChainState(np.zeros(5), lik(np.zeros(5)))
        for _ in range(200):
            state, ok, failed = pcn_step(state, 0.3, prior, lik, r)
            assert ok and not failed

    def test_beta_one_is_fresh_draw(self):
        prior = build_prior(toy_gl(4), 0.5, 2)
        xi = np.array([0.3, -1.0, 2.0, 0.5])
        state = ChainState(np.full(4, 7.0), 0.0)
        new, _, _ = pcn_step(state, 1.0, prior, const_lik(4), np.random.default_rng(0), xi=xi)
        expected = prior.eigvecs @ (np.sqrt(prior.cov_eigvals) * xi)
        np.testing.assert_allclose(new.theta, expected, atol=1e-12)

    def test_failed_forward_is_rejected_and_counted(self):
        prior = build_prior(toy_gl(3), 0.5, 2)

        def boom(th):
            raise SolverError("boom")

        lik = Likelihood(np.zeros(1), boom, sigma=1.0)
        state = ChainState(np.zeros(3), -1.0)
        new, ok, failed = pcn_step(state, 0.5, prior, lik, np.random.default_rng(0))
        assert new is state and not ok and failed

    @pytest.mark.parametrize("n", [2, 3])
    def test_matches_full_mh_oracle(self, n):
        gl = toy_gl(n, seed=n)
        prior = build_prior(gl, 0.4, 2)
        C = prior.covariance()
        lik = nonlinear_lik(n, seed=n)
        beta = 0.35
        rho = math.sqrt(1 - beta**2)
        r_impl, r_orc = np.random.default_rng(99), np.random.default_rng(99)
        state = ChainState(np.zeros(n), lik(np.zeros(n)))
        theta = np.zeros(n)
        n_acc = 0
        for _ in range(10_000):
            # oracle: same stream (n normals, one uniform), full MH ratio with prior and proposal terms
            xi = r_orc.standard_normal(n)
            prop = rho * theta + beta * (gl.eigvecs @ (np.sqrt(prior.cov_eigvals) * xi))
            u = r_orc.random()
            log_post = lambda t: lik(t) + gaussian_logpdf(t, np.zeros(n), C)
            log_q = lambda b, a: gaussian_logpdf(b, rho * a, beta**2 * C)
            log_a = log_post(prop) + log_q(theta, prop) - log_post(theta) - log_q(prop, theta)
            acc_oracle = math.log(u) < log_a
            if acc_oracle:
                theta = prop
            state, acc, _ = pcn_step(state, beta, prior, lik, r_impl)
            assert acc == acc_oracle
            n_acc += acc
        np.testing.assert_allclose(state.theta, theta, rtol=1e-12, atol=1e-12)
        assert 0 < n_acc < 10_000


class TestRunPcn:
    def test_sample_count_and_single_sample(self):
        prior = build_prior(toy_gl(4), 0.5, 2)
        tr = run_pcn(SamplerConfig(iters=11, burnin=10, thin=1, seed=0), prior, const_lik(4))
        assert tr.n_samples == 1 and tr.iterations[0] == 10
        tr = run_pcn(SamplerConfig(iters=1000, burnin=133, thin=7, seed=0), prior, const_lik(4))
        assert tr.n_samples == (1000 - 133) // 7

    def test_reproducible_bitwise(self):
        prior = build_prior(toy_gl(5), 0.5, 2)
        lik = nonlinear_lik(5)
        cfg = SamplerConfig(iters=600, burnin=200, thin=3, beta=0.3, seed=42)
        a, b = run_pcn(cfg, prior, lik), run_pcn(cfg, prior, lik)
        assert np.array_equal(a.theta, b.theta) and np.array_equal(a.loglik, b.loglik)
        assert a.tuning == b.tuning
        c = run_pcn(SamplerConfig(iters=600, burnin=200, thin=3, beta=0.3, seed=43), prior, lik)
        assert not np.array_equal(a.theta, c.theta)

    def test_constant_likelihood_per_node_variance(self):
        gl = self_tuning_laplacian(generate_ellipse(30, 3.0), 2)
        prior = build_prior(gl, 0.5, 2)
        cfg = SamplerConfig(iters=20_000, burnin=1000, thin=1, beta=0.5, seed=3, adapt=False)
        tr = run_pcn(cfg, prior, const_lik(30))
        assert tr.acceptance_rate() == 1.0
        assert np.mean(tr.theta**2) == pytest.approx(1.0, abs=0.10)

    def test_adaptation_moves_beta_toward_target(self):
        prior = build_prior(toy_gl(5), 0.5, 2)
        lik = nonlinear_lik(5)
        lik.sigma = 0.02
        tr = run_pcn(SamplerConfig(iters=6000, burnin=4000, thin=10, beta=0.9, seed=1), prior, lik)
        assert tr.beta < 0.9 and tr.tuning
        assert all(t["iteration"] <= 4000 for t in tr.tuning)

    def test_bad_config(self):
        prior = build_prior(toy_gl(3), 0.5, 2)
        for cfg in (SamplerConfig(iters=5, burnin=10), SamplerConfig(thin=0), SamplerConfig(beta=1.0)):
            with pytest.raises(SamplerConfigError):
                run_pcn(cfg, prior, const_lik(3))

    def test_default_start_is_prior_draw(self):
        prior = build_prior(toy_gl(4), 0.5, 2)
        from pcinv.prior import sample_prior

        first = sample_prior(prior, np.random.default_rng(7))
        seen = []
        run_pcn(SamplerConfig(iters=1, burnin=0, thin=1, beta=1e-9, seed=7, adapt=False), prior,
                const_lik(4), progress=lambda it, st: seen.append(st.theta))
        np.testing.assert_allclose(seen[0], first, atol=1e-8)


class TestTauStep:
    def setup_method(self):
        self.gl = self_tuning_laplacian(generate_ellipse(40, 3.0), 2)
        self.pi0 = NormalHyperprior(2.0, 1.0)

    def test_forced_same_tau_accepts(self):
        prior = build_prior(self.gl, 1.5, 4)
        theta = np.random.default_rng(0).normal(size=40)
        st = ChainState(theta, 0.0, tau=1.5)
        for seed in range(20):
            _, _, ok = tau_step(st, 0.2, prior, self.pi0, np.random.default_rng(seed), proposal=1.5)
            assert ok

    def test_nonpositive_rejected(self):
        prior = build_prior(self.gl, 0.1, 4)
        st = ChainState(np.zeros(40), 0.0, tau=0.1)
        new, p, ok = tau_step(st, 0.2, prior, self.pi0, np.random.default_rng(0), proposal=-0.3)
        assert not ok and new.tau == 0.1 and p is prior

    def test_hand_computed_ratio_n2(self):
        lam = np.array([0.0, 1.0])
        gl = GraphLaplacian(np.diag(lam), lam, np.eye(2), 1)
        theta = np.array([0.4, -0.7])
        s, g, t = 1.0, 1.0, 2.0

        def H(tau):
            w = (tau + lam) ** (-s)
            cov = 2 * w / w.sum()
            return np.sum(np.log(cov)) + np.sum(theta**2 / cov)

        expected = -0.5 * (H(t) - H(g)) - 0.5 * (t - 2) ** 2 + 0.5 * (g - 2) ** 2
        Hg = prior_logdensity_terms(build_prior(gl, g, s), theta)[1]
        Ht = prior_logdensity_terms(build_prior(gl, t, s), theta)[1]
        assert tau_log_ratio(Ht, Hg, t, g, NormalHyperprior(2, 1)) == pytest.approx(expected, abs=1e-12)

    def test_log_ratio_clipped(self):
        assert tau_log_ratio(1e6, 0.0, 1.0, 1.0, self.pi0) == -700.0
        assert tau_log_ratio(-1e6, 0.0, 1.0, 1.0, self.pi0) == 700.0

    def test_detailed_balance_two_states(self):
        theta = np.random.default_rng(1).normal(size=40) * 0.5
        taus = (0.8, 1.6)
        s = 4
        Hs = [prior_logdensity_terms(build_prior(self.gl, t, s), theta)[1] for t in taus]
        logpi = np.array([-0.5 * h + self.pi0.logpdf(t) for h, t in zip(Hs, taus)])
        pi = np.exp(logpi - logpi.max())
        pi /= pi.sum()
        r = np.random.default_rng(2)
        cur = 0
        st = ChainState(theta, 0.0, tau=taus[0])
        prior = build_prior(self.gl, taus[0], s)
        counts = np.zeros(2)
        flows = np.zeros((2, 2))
        N = 20_000
        for _ in range(N):
            st, prior, ok = tau_step(st, 0.2, prior, self.pi0, r, proposal=taus[1 - cur])
            if ok:
                flows[cur, 1 - cur] += 1
                cur = 1 - cur
            counts[cur] += 1
        freq = counts / N
        # occupancy matches the target and the two flows balance, within MC error
        assert abs(freq[0] - pi[0]) <= 5 * math.sqrt(pi[0] * pi[1] / N) * 3
        assert abs(flows[0, 1] - flows[1, 0]) <= 1

    def test_tau_mean_in_range_with_prior_theta(self):
        from pcinv.prior import sample_prior

        prior = build_prior(self.gl, 2.0, 4)
        theta = sample_prior(prior, np.random.default_rng(3))
        st = ChainState(theta, 0.0, tau=2.0)
        r = np.random.default_rng(4)
        taus = []
        for _ in range(10_000):
            st, prior, _ = tau_step(st, 0.5, prior, self.pi0, r)
            taus.append(st.tau)
        assert 1.0 <= np.mean(taus) <= 4.0
        assert min(taus) > 0


class TestRunGibbs:
    def test_peaked_hyperprior(self):
        gl = self_tuning_laplacian(generate_ellipse(30, 3.0), 2)
        pi0 = NormalHyperprior(1.0, 0.01)
        cfg = SamplerConfig(iters=20_000, burnin=1000, thin=1, beta=0.3, seed=5, tau_step=0.01)
        tr = run_gibbs(cfg, gl, 4, pi0, const_lik(30))
        # with a flat likelihood the tau-marginal is pi0 itself: 3-sigma exceedances ~0.27%
        assert abs(tr.tau.mean() - 1.0) <= 0.003
        assert tr.tau.std() == pytest.approx(0.01, rel=0.1)
        assert np.mean(np.abs(tr.tau - 1.0) > 0.03) <= 0.01
        assert set(tr.proposed) == {"theta", "tau"}
        assert tr.acceptance_rate("theta") == 1.0

    def test_zero_sweeps_after_burnin(self):
        gl = toy_gl(4)
        cfg = SamplerConfig(iters=50, burnin=50, thin=1, seed=0)
        tr = run_gibbs(cfg, gl, 2, NormalHyperprior(), const_lik(4))
        assert tr.n_samples == 0 and tr.theta.shape == (0, 4)

    def test_reproducible_bitwise(self):
        gl = toy_gl(5)
        cfg = SamplerConfig(iters=500, burnin=100, thin=2, beta=0.3, seed=8)
        a = run_gibbs(cfg, gl, 2, NormalHyperprior(), nonlinear_lik(5))
        b = run_gibbs(cfg, gl, 2, NormalHyperprior(), nonlinear_lik(5))
        assert np.array_equal(a.theta, b.theta) and np.array_equal(a.tau, b.tau)

    def test_rejects_bad_tau(self):
        with pytest.raises(SamplerConfigError):
            run_gibbs(SamplerConfig(iters=10, burnin=0), toy_gl(3), 2, NormalHyperprior(), const_lik(3),
                      tau0=-1.0)
        with pytest.raises(SamplerConfigError):
            run_gibbs(SamplerConfig(iters=10, burnin=0, tau_step=0.0), toy_gl(3), 2, NormalHyperprior(),
                      const_lik(3))


def _trace(theta):
    theta = np.asarray(theta, dtype=float)
    k = len(theta)
    return ChainTrace(np.arange(k), theta, np.zeros(k), None, {"theta": 1}, {"theta": 2}, 0)


class TestSummary:
    def test_single_sample(self):
        s = posterior_summary(_trace([[1.0, -2.0]]))
        for key in ("mean", "q025", "q975"):
            np.testing.assert_array_equal(s[key], [1.0, -2.0])
        np.testing.assert_array_equal(s["std"], 0.0)

    def test_quantile_rule(self):
        s = posterior_summary(_trace([[1.0], [2.0], [3.0], [4.0]]))
        # linear interpolation on sorted values: position p (k - 1)
        xs = [1.0, 2.0, 3.0, 4.0]
        oracle = lambda p: xs[int(p * 3)] + (p * 3 - int(p * 3)) * (xs[int(p * 3) + 1] - xs[int(p * 3)])
        assert s["q025"][0] == pytest.approx(oracle(0.025))
        assert s["q975"][0] == pytest.approx(oracle(0.975))
        assert s["mean"][0] == 2.5

    def test_exp_transform(self):
        s = posterior_summary(_trace(np.zeros((5, 3))), "exp")
        np.testing.assert_array_equal(s["mean"], 1.0)

    def test_exp_quantiles_are_quantiles_of_kappa(self):
        th = np.log([[1.0], [2.0], [10.0]])
        s = posterior_summary(_trace(th), "exp")
        assert s["mean"][0] == pytest.approx(13 / 3)

    def test_empty(self):
        with pytest.raises(ValueError):
            posterior_summary(_trace(np.zeros((0, 2))))


def test_trace_csv_round_trip(tmp_path):
    tr = ChainTrace(np.array([3, 5]), np.array([[0.1, 1 / 3], [-2.0, 1e-17]]), np.array([-1.5, -2.25]),
                    np.array([0.7, 0.9]), {"theta": 1}, {"theta": 2}, 0)
    tr.write_csv(tmp_path / "t.csv")
    it, ll, tau, th = read_trace_csv(tmp_path / "t.csv")
    np.testing.assert_array_equal(it, tr.iterations)
    np.testing.assert_array_equal(ll, tr.loglik)
    np.testing.assert_array_equal(tau, tr.tau)
    np.testing.assert_array_equal(th, tr.theta)
    assert 0 <= tr.acceptance_rate() <= 1


class TestMapEstimate:
    def test_linear_gaussian_posterior_mean(self):
        # for a linear forward map the mode is C A^T (A C A^T + sigma^2 I)^{-1} y
        prior = build_prior(toy_gl(6, seed=2), 0.5, 2)
        C = prior.covariance()
        r = np.random.default_rng(3)
        A = r.normal(size=(4, 6))
        y = r.normal(size=4)
        lik = Likelihood(y, lambda th: A @ th, sigma=0.5)
        expected = C @ A.T @ np.linalg.solve(A @ C @ A.T + 0.25 * np.eye(4), y)
        np.testing.assert_allclose(map_estimate(prior, lik, n_modes=6), expected, atol=1e-5)

    def test_truncated_to_leading_modes(self):
        prior = build_prior(toy_gl(6, seed=2), 0.5, 2)
        lik = Likelihood(np.ones(2), lambda th: th[:2], sigma=0.5)
        theta = map_estimate(prior, lik, n_modes=2)
        tail = prior.eigvecs[:, 2:].T @ theta
        np.testing.assert_allclose(tail, 0.0, atol=1e-12)

    def test_constant_likelihood_gives_zero(self):
        prior = build_prior(toy_gl(5), 0.5, 2)
        np.testing.assert_allclose(map_estimate(prior, const_lik(5)), 0.0, atol=1e-8)
