"""Self-tuning graph Laplacian and the Matern-type Gaussian prior on point-cloud functions.

The prior is N(0, c(tau) (tau I + Delta)^{-s}) with c(tau) chosen so that the
average per-node variance is one. Delta is diagonalized once; every
(tau, s) after that costs O(n).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .pointcloud import pairwise_sq_dists


class PriorError(ValueError):
    pass


@dataclass(frozen=True)
class GraphLaplacian:
    Delta: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    k: int

    @property
    def n(self):
        return len(self.eigvals)


def knn_distance(sq_dists, k):
    """Distance from each point to its k-th nearest neighbour, self excluded."""
    D2 = np.asarray(sq_dists)
    n = D2.shape[0]
    if not 1 <= k <= n - 1:
        raise PriorError(f"neighbour count k must be in [1, {n - 1}], got {k}")
    # Column 0 of the partition is the point itself (distance 0).
    part = np.partition(D2, k, axis=1)
    return np.sqrt(part[:, k])


def laplacian_from_sq_dists(D2, k):
    D2 = np.ascontiguousarray(D2, dtype=float)
    d = knn_distance(D2, k)
    if np.any(d == 0):
        i = int(np.argmax(d == 0))
        raise PriorError(f"point {i} has {k} or more duplicates; k-th neighbour distance is zero")
    S = _kernels.similarity(D2, d)
    inv_sqrt_a = 1.0 / np.sqrt(S.sum(axis=1))
    Delta = np.eye(len(d)) - inv_sqrt_a[:, None] * S * inv_sqrt_a[None, :]
    Delta = 0.5 * (Delta + Delta.T)
    lam, V = np.linalg.eigh(Delta)
    lam = np.clip(lam, 0.0, None)
    for a in (Delta, lam, V):
        a.setflags(write=False)
    return GraphLaplacian(Delta, lam, V, int(k))


def self_tuning_laplacian(pc, k, sq_dists=None):
    if sq_dists is None:
        sq_dists = pairwise_sq_dists(pc)
    return laplacian_from_sq_dists(sq_dists, k)


def covariance_spectrum(eigvals, tau, s):
    """Eigenvalues c(tau) (tau + lambda_i)^{-s}, normalized to sum to n."""
    # log-space keeps tau + lambda ~ 1e-3 with s ~ 8 from underflowing the sum
    logw = -s * np.log(tau + eigvals)
    logw -= logw.max()
    w = np.exp(logw)
    return len(eigvals) * w / w.sum()


@dataclass(frozen=True)
class GraphPrior:
    laplacian: GraphLaplacian
    tau: float
    s: float
    c: float
    cov_eigvals: np.ndarray

    @property
    def n(self):
        return self.laplacian.n

    @property
    def eigvecs(self):
        return self.laplacian.eigvecs

    def covariance(self):
        V = self.laplacian.eigvecs
        return (V * self.cov_eigvals) @ V.T

    def with_tau(self, tau):
        return build_prior(self.laplacian, tau, self.s)


def build_prior(gl, tau, s):
    if not (np.isfinite(tau) and tau > 0):
        raise PriorError(f"tau must be positive, got {tau}")
    if not (np.isfinite(s) and s > 0):
        raise PriorError(f"s must be positive, got {s}")
    cov = covariance_spectrum(gl.eigvals, tau, s)
    # c = n / sum (tau + lam)^{-s}; via the smallest eigenvalue to stay in range
    lam0 = gl.eigvals[0]
    c = cov[0] * (tau + lam0) ** s
    cov.setflags(write=False)
    return GraphPrior(gl, float(tau), float(s), float(c), cov)


def sample_prior(prior, rng, xi=None):
    """One draw sum_i sqrt(cov_i) xi_i phi_i; ``xi`` overrides the normal draws."""
    if xi is None:
        xi = rng.standard_normal(prior.n)
    return prior.laplacian.eigvecs @ (np.sqrt(prior.cov_eigvals) * xi)


def prior_logdensity_terms(prior, theta, coeffs=None):
    """Return (coeffs, H) with coeffs = V^T theta and
    H = sum_i log lam_i + coeffs_i^2 / lam_i over the covariance eigenvalues.

    ``H + n log(2 pi)`` is minus twice the Gaussian log-density of theta.
    """
    lam = prior.cov_eigvals
    if np.any(lam <= 0):
        raise PriorError("covariance eigenvalue underflowed to zero")
    if coeffs is None:
        theta = np.asarray(theta, dtype=float)
        if not np.isfinite(theta).all():
            raise PriorError("theta is not finite")
        coeffs = prior.laplacian.eigvecs.T @ theta
    H = float(np.sum(np.log(lam)) + np.sum(coeffs**2 / lam))
    return coeffs, H
