"""Discrete forward map: theta -> kappa = exp(theta) -> u solving L u = f -> observations.

Three solvers return the q-mean-zero solution:

``pinv``
    Moore-Penrose solution through an SVD of ``L``, shifted to q-mean zero.
``eig``
    Expansion in the q-orthonormal eigenbasis of ``L``, dropping the
    constant mode. For f with a nonzero q-mean it returns the weak solution.
``chol``
    Same answer as ``pinv`` at a fraction of the cost. ``f`` is projected
    onto range(L) (Euclidean complement of ``1/Q``), then the symmetric
    conjugate ``Q^{-1/2} L Q^{1/2}`` is made definite by a rank-one shift
    along its null vector and Cholesky-factorized.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import _kernels
from .kernel_operator import (
    DiscreteOperator,
    OperatorError,
    density_estimate,
    kernel_matrix,
)
from .pointcloud import pairwise_sq_dists

RTOL = 1e-10
SOLVERS = ("chol", "pinv", "eig")
THETA_MAX = 300.0


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class ObservationMap:
    """Pointwise (``indices``) or smoothed (``weights``, J x n) observations."""

    indices: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        if (self.indices is None) == (self.weights is None):
            raise ValueError("give exactly one of indices or weights")
        if self.indices is not None:
            idx = np.asarray(self.indices, dtype=np.intp).ravel()
            if len(np.unique(idx)) != len(idx):
                raise ValueError("observation indices must be distinct")
            if idx.size and idx.min() < 0:
                raise IndexError(f"negative observation index {idx.min()}")
            object.__setattr__(self, "indices", idx)
        else:
            K = np.atleast_2d(np.asarray(self.weights, dtype=float))
            if not np.isfinite(K).all():
                raise ValueError("smoothing weights must be finite")
            if np.any(np.all(K == 0, axis=1)):
                raise ValueError("a smoothing weight row is identically zero")
            object.__setattr__(self, "weights", K)

    @property
    def kind(self):
        return "pointwise" if self.indices is not None else "smoothed"

    @property
    def J(self):
        return len(self.indices) if self.indices is not None else self.weights.shape[0]

    @classmethod
    def pointwise(cls, indices):
        return cls(indices=indices)

    @classmethod
    def smoothed(cls, weights):
        return cls(weights=weights)

    @classmethod
    def strided(cls, n, J):
        """J evenly strided sites out of n; nested for J dividing n."""
        if not 1 <= J <= n:
            raise ValueError(f"observation count J={J} out of range [1, {n}]")
        return cls(indices=(np.arange(J) * n) // J)


def observe(obs, u, q):
    u = np.asarray(u, dtype=float)
    if obs.indices is not None:
        if obs.indices.size and obs.indices.max() >= len(u):
            raise IndexError(f"observation index {obs.indices.max()} out of range for n={len(u)}")
        return u[obs.indices]
    K = obs.weights
    if K.shape[1] != len(u):
        raise ValueError(f"smoothing weights have {K.shape[1]} columns, expected {len(u)}")
    return K @ (u / np.asarray(q)) / len(u)


@dataclass(frozen=True)
class ForwardResult:
    u: np.ndarray
    residual: float
    meanzero_defect: float
    skipped_modes: int = 0
    discarded: float = 0.0


def _q_shift(u, q):
    w = 1.0 / q
    return u - np.dot(u, w) / w.sum()


def _finish(L, u, f, q, skipped, discarded):
    u = _q_shift(u, q)
    return ForwardResult(
        u=u,
        residual=float(np.linalg.norm(L @ u - f)),
        meanzero_defect=abs(float(np.sum(u / q) / len(q))),
        skipped_modes=int(skipped),
        discarded=float(discarded),
    )


def _check_f(f, n):
    f = np.asarray(f, dtype=float)
    if f.shape != (n,):
        raise ValueError(f"right-hand side must have shape ({n},), got {f.shape}")
    if not np.isfinite(f).all():
        raise SolverError("right-hand side is not finite")
    return f


def _range_projection(f, Q):
    # Left null vector of L is 1/Q; range(L) is its Euclidean complement.
    r = 1.0 / Q
    c = np.dot(f, r) / np.dot(r, r)
    return f - c * r, abs(c) * np.linalg.norm(r)


def solve_pinv(op, f, rtol=RTOL):
    f = _check_f(f, op.n)
    try:
        U, s, Vt = np.linalg.svd(op.L)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"SVD failed: {exc}") from exc
    keep = s > rtol * s[0]
    coef = (U[:, keep].T @ f) / s[keep]
    u = Vt[keep].T @ coef
    _, discarded = _range_projection(f, op.Q)
    return _finish(op.L, u, f, op.q, np.count_nonzero(~keep), discarded)


def q_eigh(op):
    """q-orthonormal eigenpairs (ascending) of the operator."""
    A = op.symmetric()
    try:
        lam, U = np.linalg.eigh(A)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"eigendecomposition failed: {exc}") from exc
    # v = M^{-1/2} U with M = diag(1/(n q)), so <v_i, v_j>_q = delta_ij.
    V = np.sqrt(op.n * op.q)[:, None] * U
    return lam, V


def solve_eig(op, f, rtol=RTOL):
    f = _check_f(f, op.n)
    lam, V = q_eigh(op)
    coeffs = V.T @ (f / (op.n * op.q))
    keep = lam > rtol * lam[-1]
    u = V[:, keep] @ (coeffs[keep] / lam[keep])
    discarded = abs(coeffs[~keep]).sum() if (~keep).any() else 0.0
    return _finish(op.L, u, f, op.q, np.count_nonzero(~keep), discarded)


def _chol_core(H, Q, sqrt_kappa, epsilon, f):
    sQ = np.sqrt(Q)
    A = _kernels.symmetric_operator(H, Q, sqrt_kappa)
    z = 1.0 / sQ
    shift = np.mean(np.diag(A)) / np.dot(z, z)
    A += shift * np.outer(z, z)
    fE, discarded = _range_projection(f, Q)
    try:
        cf = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"Cholesky factorization failed: {exc}") from exc
    w = scipy.linalg.cho_solve(cf, epsilon * fE / sQ, check_finite=False)
    return sQ * w, discarded


def solve_chol(op, f, rtol=RTOL):
    """Pseudoinverse solution via a deflated Cholesky solve; ``rtol`` unused."""
    f = _check_f(f, op.n)
    u, discarded = _chol_core(op.H, op.Q, np.sqrt(op.kappa), op.epsilon, f)
    return _finish(op.L, u, f, op.q, 1, discarded)


def solve(op, f, solver="chol", rtol=RTOL):
    if solver == "pinv":
        return solve_pinv(op, f, rtol)
    if solver == "eig":
        return solve_eig(op, f, rtol)
    if solver == "chol":
        return solve_chol(op, f, rtol)
    raise ValueError(f"unknown solver {solver!r}; expected one of {SOLVERS}")


def check_theta(theta):
    theta = np.asarray(theta, dtype=float)
    if not np.isfinite(theta).all():
        raise SolverError("theta is not finite")
    big = np.abs(theta) > THETA_MAX
    if big.any():
        i = int(np.argmax(big))
        raise SolverError(f"|theta[{i}]| = {abs(theta[i]):.3g} exceeds {THETA_MAX}; exp would overflow")
    return theta


class ForwardModel:
    """Cached forward map for a fixed cloud, bandwidth, source and observations.

    The kernel matrix and density depend only on the cloud and bandwidth, so
    they are built once; each call then costs one operator assembly and one
    solve. Instances are read-only after construction.
    """

    def __init__(self, pc, epsilon, f, obs, solver="chol", rtol=RTOL, sq_dists=None):
        if solver not in SOLVERS:
            raise ValueError(f"unknown solver {solver!r}; expected one of {SOLVERS}")
        if sq_dists is None:
            sq_dists = pairwise_sq_dists(pc)
        self.pc = pc
        self.epsilon = float(epsilon)
        self.H = kernel_matrix(sq_dists, epsilon)
        self.H.setflags(write=False)
        self.Q = self.H.sum(axis=1)
        self.q = density_estimate(self.H, epsilon, pc.m)
        self.f = _check_f(f, pc.n)
        self.obs = obs
        self.solver = solver
        self.rtol = rtol

    @property
    def n(self):
        return self.pc.n

    def operator(self, theta):
        from .kernel_operator import assemble_from_kernel

        theta = check_theta(theta)
        return assemble_from_kernel(self.H, np.exp(theta), self.epsilon, self.pc.m)

    def solve(self, theta):
        theta = check_theta(theta)
        if self.solver == "chol":
            u, _ = _chol_core(self.H, self.Q, np.exp(0.5 * theta), self.epsilon, self.f)
            return _q_shift(u, self.q)
        return solve(self.operator(theta), self.f, self.solver, self.rtol).u

    def __call__(self, theta):
        return observe(self.obs, self.solve(theta), self.q)


def forward_map(theta, pc, epsilon, f, obs, solver="chol", rtol=RTOL):
    return ForwardModel(pc, epsilon, f, obs, solver, rtol)(theta)


__all__ = [
    "ForwardModel",
    "ForwardResult",
    "ObservationMap",
    "OperatorError",
    "SolverError",
    "SOLVERS",
    "forward_map",
    "observe",
    "q_eigh",
    "solve",
    "solve_chol",
    "solve_eig",
    "solve_pinv",
    "DiscreteOperator",
]
