"""Kernel discretization of the anisotropic diffusion operator on a point cloud.

With ``H_ij = exp(-|x_i - x_j|^2 / (4 eps))`` and ``Q = H 1``, the operator is

    L = (diag(D) - W) / eps,   W_ij = H_ij sqrt(kappa_i kappa_j) / Q_j,

so that ``(L u)_i = (1/eps) sum_j W_ij (u_i - u_j)``. ``L`` is self-adjoint
and positive semi-definite under ``<u, v>_q = (1/n) sum u_i v_i / q_i``
where ``q`` is the kernel density estimate.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .pointcloud import PointCloud, pairwise_sq_dists


class OperatorError(ValueError):
    pass


def _check_eps(epsilon):
    if not (np.isfinite(epsilon) and epsilon > 0):
        raise OperatorError(f"bandwidth epsilon must be positive and finite, got {epsilon}")


def kernel_matrix(sq_dists, epsilon):
    _check_eps(epsilon)
    return np.exp(-np.asarray(sq_dists, dtype=float) / (4.0 * epsilon))


def density_estimate(H, epsilon, m):
    """Kernel density estimate q_j = sum_k H_jk / (sqrt(4 pi) n eps^{m/2})."""
    _check_eps(epsilon)
    H = np.atleast_2d(H)
    n = H.shape[0]
    return H.sum(axis=1) / (np.sqrt(4.0 * np.pi) * n * epsilon ** (m / 2.0))


def weighted_inner(u, v, q):
    u, v, q = (np.asarray(x, dtype=float) for x in (u, v, q))
    return float(np.sum(u * v / q) / len(q))


@dataclass(frozen=True)
class DiscreteOperator:
    epsilon: float
    m: int
    H: np.ndarray
    Q: np.ndarray
    q: np.ndarray
    W: np.ndarray
    Dvec: np.ndarray
    L: np.ndarray
    kappa: np.ndarray

    @property
    def n(self):
        return self.L.shape[0]

    def apply(self, u):
        return self.L @ u

    def inner(self, u, v):
        return weighted_inner(u, v, self.q)

    def symmetric(self):
        """``Q^{-1/2} L Q^{1/2}``; symmetric with the same spectrum as ``L``."""
        A = _kernels.symmetric_operator(self.H, self.Q, np.sqrt(self.kappa)) / self.epsilon
        return 0.5 * (A + A.T)


def _validate_kappa(kappa, n):
    kappa = np.ascontiguousarray(kappa, dtype=float)
    if kappa.shape != (n,):
        raise OperatorError(f"kappa must have shape ({n},), got {kappa.shape}")
    bad = ~(np.isfinite(kappa) & (kappa > 0))
    if bad.any():
        i = int(np.argmax(bad))
        raise OperatorError(f"kappa must be positive and finite; kappa[{i}] = {kappa[i]}")
    return kappa


def assemble_from_kernel(H, kappa, epsilon, m):
    _check_eps(epsilon)
    H = np.ascontiguousarray(H, dtype=float)
    kappa = _validate_kappa(kappa, H.shape[0])
    Q = H.sum(axis=1)
    q = density_estimate(H, epsilon, m)
    W, Dvec = _kernels.weighted_matrix(H, Q, np.sqrt(kappa))
    L = -W
    L[np.diag_indices_from(L)] += Dvec
    L /= epsilon
    return DiscreteOperator(float(epsilon), int(m), H, Q, q, W, Dvec, L, kappa)


def assemble_operator(pc, kappa, epsilon, sq_dists=None):
    """Assemble the discrete operator for diffusion ``kappa`` on cloud ``pc``."""
    _check_eps(epsilon)
    if sq_dists is None:
        sq_dists = pairwise_sq_dists(pc)
    H = kernel_matrix(sq_dists, epsilon)
    return assemble_from_kernel(H, kappa, epsilon, pc.m)


@dataclass(frozen=True)
class BandwidthDiagnostic:
    """T(eps) table with two bandwidth suggestions.

    ``eps_star`` maximizes the log-log slope of T. ``eps_dim`` is where the
    slope first reaches m/2 (log-interpolated), i.e. the small-bandwidth end
    of the regime where T grows like eps^{m/2}; it is None when m is not
    given or the slope never reaches m/2.
    """

    eps: np.ndarray
    T: np.ndarray
    slope: np.ndarray
    eps_star: float
    eps_dim: float | None

    def rows(self):
        return list(zip(self.eps.tolist(), self.T.tolist(), self.slope.tolist()))


def default_eps_grid(sq_dists, lo=1e-4, hi=1e1, num=40):
    d2 = np.asarray(sq_dists)
    med = float(np.median(d2[d2 > 0]))
    return np.logspace(np.log10(lo), np.log10(hi), num) * med


def _log_slope(x, y):
    lx, ly = np.log(x), np.log(y)
    if len(x) == 1:
        return np.zeros(1)
    s = np.empty_like(lx)
    s[1:-1] = (ly[2:] - ly[:-2]) / (lx[2:] - lx[:-2])
    s[0] = (ly[1] - ly[0]) / (lx[1] - lx[0])
    s[-1] = (ly[-1] - ly[-2]) / (lx[-1] - lx[-2])
    return s


def bandwidth_diagnostic(sq_dists, eps_grid, m=None):
    eps = np.asarray(eps_grid, dtype=float).ravel()
    if eps.size == 0:
        raise OperatorError("bandwidth grid is empty")
    if np.any(eps <= 0) or np.any(np.diff(eps) <= 0):
        raise OperatorError("bandwidth grid must be positive and strictly increasing")
    D2 = np.ascontiguousarray(sq_dists, dtype=float)
    T = np.array([_kernels.kernel_sum(D2, e) for e in eps])
    slope = _log_slope(eps, T)
    eps_star = float(eps[int(np.argmax(slope))])
    eps_dim = None
    if m is not None:
        target = m / 2.0
        hit = np.flatnonzero(slope >= target)
        if hit.size:
            i = int(hit[0])
            if i == 0:
                eps_dim = float(eps[0])
            else:
                s0, s1 = slope[i - 1], slope[i]
                t = (target - s0) / (s1 - s0)
                eps_dim = float(np.exp((1 - t) * np.log(eps[i - 1]) + t * np.log(eps[i])))
    return BandwidthDiagnostic(eps, T, slope, eps_star, eps_dim)
