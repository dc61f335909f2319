"""pCN and Metropolis-within-Gibbs samplers for the point-cloud posterior.

The pCN proposal ``sqrt(1 - beta^2) theta + beta xi`` with ``xi`` drawn from
the Gaussian prior leaves the prior invariant, so the accept/reject step only
involves the likelihood. In hierarchical mode the prior length-scale ``tau``
is updated by a random-walk move whose ratio depends on theta only through
its coefficients in the graph eigenbasis; no forward solve is needed.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.optimize

from .forward import SolverError
from .prior import GraphPrior, build_prior, prior_logdensity_terms, sample_prior

log = logging.getLogger(__name__)

LOG_RATIO_CLIP = 700.0
TARGET_ACCEPT = (0.20, 0.35)


class SamplerConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------

@dataclass
class Likelihood:
    """Gaussian likelihood exp(-|y - G(theta)|^2_Gamma / 2).

    Give either a noise standard deviation ``sigma`` (Gamma = sigma^2 I) or a
    full SPD ``Gamma``.
    """

    y: np.ndarray
    forward: Callable[[np.ndarray], np.ndarray]
    sigma: float | None = None
    Gamma: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        if (self.sigma is None) == (self.Gamma is None):
            raise ValueError("give exactly one of sigma or Gamma")
        if self.sigma is not None:
            if not self.sigma > 0:
                raise ValueError(f"noise sigma must be positive, got {self.sigma}")
            self._chol = None
        else:
            G = np.asarray(self.Gamma, dtype=float)
            if G.shape != (len(self.y),) * 2 or not np.allclose(G, G.T):
                raise ValueError("Gamma must be a symmetric J x J matrix")
            try:
                self._chol = scipy.linalg.cho_factor(G, lower=True)
            except np.linalg.LinAlgError as exc:
                raise ValueError("Gamma is not positive definite") from exc

    def __call__(self, theta):
        return log_likelihood(self, self.forward(theta))


def log_likelihood(lik, g):
    r = lik.y - np.asarray(g, dtype=float)
    if lik._chol is None:
        return -0.5 * float(np.dot(r, r)) / lik.sigma**2
    return -0.5 * float(np.dot(r, scipy.linalg.cho_solve(lik._chol, r)))


# ---------------------------------------------------------------------------
# hyperprior on tau
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormalHyperprior:
    """N(mean, std^2) restricted to tau > 0; the restriction is enforced by
    rejecting nonpositive proposals, so the normalizer never matters."""

    mean: float = 2.0
    std: float = 1.0

    def logpdf(self, tau):
        return -0.5 * ((tau - self.mean) / self.std) ** 2


# ---------------------------------------------------------------------------
# chain state and trace
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChainState:
    theta: np.ndarray
    loglik: float
    tau: float | None = None
    prior_coeffs: np.ndarray | None = None
    H: float | None = None


@dataclass
class SamplerConfig:
    iters: int = 200_000
    burnin: int = 50_000
    thin: int = 10
    beta: float = 0.02
    seed: int = 0
    adapt: bool = True
    adapt_interval: int = 100
    tau_step: float = 0.2

    def validate(self, hierarchical=False):
        if self.burnin < 0 or self.iters < self.burnin:
            raise SamplerConfigError(
                f"need iters >= burnin >= 0, got iters={self.iters}, burnin={self.burnin}"
            )
        if self.thin < 1:
            raise SamplerConfigError(f"thin must be >= 1, got {self.thin}")
        if not 0 < self.beta < 1:
            raise SamplerConfigError(f"beta must lie in (0, 1), got {self.beta}")
        if self.adapt_interval < 1:
            raise SamplerConfigError("adapt_interval must be >= 1")
        if hierarchical and not self.tau_step > 0:
            raise SamplerConfigError(f"tau_step must be positive, got {self.tau_step}")


@dataclass
class ChainTrace:
    iterations: np.ndarray
    theta: np.ndarray
    loglik: np.ndarray
    tau: np.ndarray | None
    accepted: dict
    proposed: dict
    failed: int
    tuning: list = field(default_factory=list)
    seed: int | None = None
    beta: float | None = None
    tau_step: float | None = None

    @property
    def n_samples(self):
        return len(self.iterations)

    def acceptance_rate(self, move="theta"):
        p = self.proposed.get(move, 0)
        return self.accepted.get(move, 0) / p if p else 0.0

    def summary(self):
        return {
            "seed": self.seed,
            "n_samples": self.n_samples,
            "acceptance": {k: self.acceptance_rate(k) for k in self.proposed},
            "accepted": dict(self.accepted),
            "proposed": dict(self.proposed),
            "failed_proposals": self.failed,
            "beta": self.beta,
            "tau_step": self.tau_step,
            "tuning": self.tuning,
        }

    def write_csv(self, path):
        n = self.theta.shape[1] if self.theta.ndim == 2 else 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loglik", "tau"] + [f"theta_{i + 1}" for i in range(n)])
            for k in range(self.n_samples):
                tau = "" if self.tau is None else repr(float(self.tau[k]))
                w.writerow(
                    [int(self.iterations[k]), repr(float(self.loglik[k])), tau]
                    + [repr(float(v)) for v in self.theta[k]]
                )


def read_trace_csv(path):
    """Inverse of ``ChainTrace.write_csv`` for the sample columns."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    it = np.array([int(r[0]) for r in body], dtype=np.int64)
    ll = np.array([float(r[1]) for r in body])
    tau = None if not body or body[0][2] == "" else np.array([float(r[2]) for r in body])
    theta = np.array([[float(v) for v in r[3:]] for r in body])
    return it, ll, tau, theta


# ---------------------------------------------------------------------------
# moves
# ---------------------------------------------------------------------------

def _safe_loglik(lik, theta):
    try:
        return lik(theta), False
    except (SolverError, FloatingPointError, np.linalg.LinAlgError):
        return -np.inf, True


def pcn_step(state, beta, prior, lik, rng, xi=None):
    """One pCN Metropolis-Hastings step.

    Returns ``(new_state, accepted, failed)``; ``failed`` flags a proposal
    whose forward solve raised, which is rejected. The random stream is
    always one prior draw (n normals) followed by one uniform.
    """
    draw = sample_prior(prior, rng, xi)
    prop = math.sqrt(1.0 - beta * beta) * state.theta + beta * draw
    u = rng.random()
    ll_prop, failed = _safe_loglik(lik, prop)
    if failed:
        return state, False, True
    log_a = ll_prop - state.loglik
    if math.log(u) < log_a:
        return replace(state, theta=prop, loglik=ll_prop, prior_coeffs=None, H=None), True, False
    return state, False, False


def _with_H(state, prior):
    if state.prior_coeffs is not None and state.H is not None:
        return state
    coeffs, H = prior_logdensity_terms(prior, state.theta, state.prior_coeffs)
    return replace(state, prior_coeffs=coeffs, H=H)


def tau_log_ratio(H_prop, H_cur, tau_prop, tau_cur, pi0):
    d = -0.5 * (H_prop - H_cur)
    d = min(max(d, -LOG_RATIO_CLIP), LOG_RATIO_CLIP)
    return d + pi0.logpdf(tau_prop) - pi0.logpdf(tau_cur)


def tau_step(state, step, prior, pi0, rng, proposal=None):
    """Random-walk Metropolis update of tau given theta.

    ``prior`` is the GraphPrior at the current tau (its Laplacian and s are
    reused for the proposal). Returns ``(new_state, new_prior, accepted)``.
    The random stream is one normal followed by one uniform.
    """
    z = rng.standard_normal()
    u = rng.random()
    tau_prop = state.tau + step * z if proposal is None else float(proposal)
    state = _with_H(state, prior)
    if not tau_prop > 0:
        return state, prior, False
    prior_prop = build_prior(prior.laplacian, tau_prop, prior.s)
    _, H_prop = prior_logdensity_terms(prior_prop, state.theta, state.prior_coeffs)
    log_a = tau_log_ratio(H_prop, state.H, tau_prop, state.tau, pi0)
    if math.log(u) < log_a:
        return replace(state, tau=tau_prop, H=H_prop), prior_prop, True
    return state, prior, False


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------

def _adapt(scale, rate):
    lo, hi = TARGET_ACCEPT
    if lo <= rate <= hi:
        return scale
    return scale * math.exp(rate - 0.5 * (lo + hi))


class _Recorder:
    def __init__(self, cfg, n, hierarchical):
        self.cfg = cfg
        n_keep = (cfg.iters - cfg.burnin) // cfg.thin
        self.iterations = np.empty(n_keep, dtype=np.int64)
        self.theta = np.empty((n_keep, n))
        self.loglik = np.empty(n_keep)
        self.tau = np.empty(n_keep) if hierarchical else None
        self.k = 0

    def maybe_store(self, it, state):
        cfg = self.cfg
        if it < cfg.burnin or (it - cfg.burnin + 1) % cfg.thin:
            return
        if self.k >= len(self.iterations):
            return
        self.iterations[self.k] = it
        self.theta[self.k] = state.theta
        self.loglik[self.k] = state.loglik
        if self.tau is not None:
            self.tau[self.k] = state.tau
        self.k += 1


def _initial_state(lik, theta0, prior, rng):
    if theta0 is None:
        theta0 = sample_prior(prior, rng)
    theta0 = np.asarray(theta0, dtype=float).copy()
    ll, failed = _safe_loglik(lik, theta0)
    if failed:
        raise SolverError("forward map failed at the initial state")
    return theta0, ll


def map_estimate(prior, lik, n_modes=100, maxiter=2000):
    """Posterior mode restricted to the leading ``n_modes`` prior eigenmodes.

    Minimizes ``-loglik + |z|^2 / 2`` over whitened coefficients ``z`` with
    L-BFGS (finite-difference gradients), starting from ``theta = 0``. Meant as
    a chain start that shortens burn-in; it does not change what the chain
    samples.
    """
    K = min(int(n_modes), prior.n)
    V = prior.eigvecs[:, :K]
    sd = np.sqrt(prior.cov_eigvals[:K])

    def objective(z):
        ll, failed = _safe_loglik(lik, V @ (sd * z))
        return 1e10 if failed else -ll + 0.5 * float(z @ z)

    res = scipy.optimize.minimize(objective, np.zeros(K), method="L-BFGS-B",
                                  options={"maxiter": maxiter, "maxfun": 10**6})
    log.info("MAP start: objective %.4g after %d iterations (%s)", res.fun, res.nit, res.message)
    return V @ (sd * res.x)


def run_pcn(cfg, prior, lik, theta0=None, progress=None):
    """pCN chain; ``theta0`` defaults to a prior draw."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    theta, ll = _initial_state(lik, theta0, prior, rng)
    state = ChainState(theta, ll)
    rec = _Recorder(cfg, prior.n, hierarchical=False)
    beta = cfg.beta
    acc = prop = failed = 0
    win = 0
    tuning = []
    for it in range(cfg.iters):
        state, ok, bad = pcn_step(state, beta, prior, lik, rng)
        prop += 1
        acc += ok
        failed += bad
        win += ok
        if cfg.adapt and it < cfg.burnin and (it + 1) % cfg.adapt_interval == 0:
            rate = win / cfg.adapt_interval
            new = min(max(_adapt(beta, rate), 1e-8), 0.999)
            if new != beta:
                tuning.append({"iteration": it + 1, "move": "theta", "rate": rate, "beta": new})
            beta = new
            win = 0
        if it == cfg.burnin - 1:
            # rates below are measured with the frozen step size only
            acc = prop = 0
        rec.maybe_store(it, state)
        if progress is not None:
            progress(it, state)
    return ChainTrace(
        rec.iterations[: rec.k], rec.theta[: rec.k], rec.loglik[: rec.k], None,
        {"theta": acc}, {"theta": prop}, failed, tuning, cfg.seed, beta, None,
    )


def run_gibbs(cfg, gl, s, pi0, lik, theta0=None, tau0=None, progress=None):
    """Metropolis-within-Gibbs over (theta, tau): one pCN move, one tau move per sweep."""
    cfg.validate(hierarchical=True)
    rng = np.random.default_rng(cfg.seed)
    tau = pi0.mean if tau0 is None else float(tau0)
    if not tau > 0:
        raise SamplerConfigError(f"initial tau must be positive, got {tau}")
    prior = build_prior(gl, tau, s)
    theta, ll = _initial_state(lik, theta0, prior, rng)
    state = _with_H(ChainState(theta, ll, tau=tau), prior)
    rec = _Recorder(cfg, gl.n, hierarchical=True)
    beta, step = cfg.beta, cfg.tau_step
    acc = {"theta": 0, "tau": 0}
    prop = {"theta": 0, "tau": 0}
    win = {"theta": 0, "tau": 0}
    failed = 0
    tuning = []
    for it in range(cfg.iters):
        state, ok, bad = pcn_step(state, beta, prior, lik, rng)
        failed += bad
        acc["theta"] += ok
        win["theta"] += ok
        state, prior, ok_tau = tau_step(state, step, prior, pi0, rng)
        acc["tau"] += ok_tau
        win["tau"] += ok_tau
        prop["theta"] += 1
        prop["tau"] += 1
        if cfg.adapt and it < cfg.burnin and (it + 1) % cfg.adapt_interval == 0:
            r_th = win["theta"] / cfg.adapt_interval
            r_tau = win["tau"] / cfg.adapt_interval
            new_beta = min(max(_adapt(beta, r_th), 1e-8), 0.999)
            new_step = min(max(_adapt(step, r_tau), 1e-6), 1e3)
            if new_beta != beta or new_step != step:
                tuning.append({"iteration": it + 1, "rate_theta": r_th, "rate_tau": r_tau,
                               "beta": new_beta, "tau_step": new_step})
            beta, step = new_beta, new_step
            win = {"theta": 0, "tau": 0}
        if it == cfg.burnin - 1:
            acc = {"theta": 0, "tau": 0}
            prop = {"theta": 0, "tau": 0}
        rec.maybe_store(it, state)
        if progress is not None:
            progress(it, state)
    return ChainTrace(
        rec.iterations[: rec.k], rec.theta[: rec.k], rec.loglik[: rec.k], rec.tau[: rec.k],
        acc, prop, failed, tuning, cfg.seed, beta, step,
    )


def posterior_summary(trace, transform="identity", quantiles=(0.025, 0.975)):
    """Pointwise mean, std and quantiles (numpy 'linear' rule) of stored samples.

    ``transform="exp"`` maps theta-samples to kappa-samples first.
    """
    if trace.n_samples == 0:
        raise ValueError("trace holds no samples")
    X = trace.theta
    if transform == "exp":
        X = np.exp(X)
    elif transform != "identity":
        raise ValueError(f"unknown transform {transform!r}")
    lo, hi = np.quantile(X, quantiles, axis=0)
    return {"mean": X.mean(axis=0), "std": X.std(axis=0), "q025": lo, "q975": hi}
