"""Synthetic ground truths, observation noise and error metrics.

Sign convention throughout: ``-div(kappa grad u) = f``, which makes the
discrete operator positive semi-definite. Closed-form sources are checked
against a finite-difference evaluation of the same divergence at
construction time.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .forward import _q_shift
from .kernel_operator import assemble_operator, density_estimate, kernel_matrix
from .pointcloud import PointCloud, pairwise_sq_dists, subsample
from .prior import build_prior, sample_prior

FD_STEP = 1e-3
FD_RTOL = 1e-6


class TruthError(RuntimeError):
    pass


@dataclass(frozen=True)
class SyntheticTruth:
    kappa_true: np.ndarray
    u_true: np.ndarray
    f: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.all(self.kappa_true > 0):
            raise TruthError("kappa_true must be positive")

    @property
    def theta_true(self):
        return np.log(self.kappa_true)


def _d(fn, x, h=FD_STEP):
    # 4th-order central difference
    return (-fn(x + 2 * h) + 8 * fn(x + h) - 8 * fn(x - h) + fn(x - 2 * h)) / (12 * h)


def _check_fd(f_closed, f_fd, what):
    scale = max(np.abs(f_closed).max(), 1e-300)
    err = np.abs(f_closed - f_fd).max() / scale
    if not err <= FD_RTOL:
        raise TruthError(
            f"{what}: closed-form source disagrees with finite differences (rel err {err:.2e})"
        )
    return float(err)


# ---------------------------------------------------------------------------
# ellipse
# ---------------------------------------------------------------------------

def ellipse_source(w, a, kappa, dkappa, u, du, d2u):
    """-(1/sqrt g) d/dw(kappa u' / sqrt g) for g = sin^2 w + a^2 cos^2 w."""
    g = np.sin(w) ** 2 + a * a * np.cos(w) ** 2
    dg = 2.0 * np.sin(w) * np.cos(w) * (1.0 - a * a)
    sg = np.sqrt(g)
    dflux = dkappa * du / sg + kappa * d2u / sg - kappa * du * dg / (2.0 * g * sg)
    return -dflux / sg


def ellipse_source_fd(w, a, kappa_fn, u_fn):
    sg = lambda x: np.sqrt(np.sin(x) ** 2 + a * a * np.cos(x) ** 2)
    flux = lambda x: kappa_fn(x) * _d(u_fn, x) / sg(x)
    return -_d(flux, w) / sg(w)


def ellipse_truth(n, a=3.0):
    """kappa = 2 + cos w, u = cos w on the ellipse grid."""
    from .pointcloud import generate_ellipse

    pc = generate_ellipse(n, a)
    w = pc.params[:, 0]
    f = ellipse_source(w, a, 2 + np.cos(w), -np.sin(w), np.cos(w), -np.sin(w), -np.cos(w))
    fd = ellipse_source_fd(w, a, lambda x: 2 + np.cos(x), np.cos)
    err = _check_fd(f, fd, "ellipse")
    return SyntheticTruth(2 + np.cos(w), np.cos(w), f, {"kind": "ellipse", "a": a, "fd_rel_err": err})


def chart_weighted_mean(values, pc):
    """sum(v sqrt(det g)) / sum(sqrt(det g)) on the (uniform) parameter grid."""
    vol = pc.chart.volume_density(pc.params)
    return float(np.sum(values * vol) / np.sum(vol))


# ---------------------------------------------------------------------------
# torus
# ---------------------------------------------------------------------------

def torus_source(w1, w2):
    """-(1/R)[d1(kappa R d1 u) + d2(kappa R^{-1} d2 u)], R = 2 + cos w1,
    for kappa = 2 + sin w1 sin w2 and u = sin w1 sin w2."""
    s1, c1, s2, c2 = np.sin(w1), np.cos(w1), np.sin(w2), np.cos(w2)
    R = 2.0 + c1
    kappa = 2.0 + s1 * s2
    t1 = s2 * ((c1 * s2) * R * c1 - kappa * s1 * c1 - kappa * R * s1)
    t2 = (s1 / R) * (s1 * c2 * c2 - kappa * s2)
    return -(t1 + t2) / R


def torus_source_fd(w1, w2, kappa_fn, u_fn):
    R = lambda x: 2.0 + np.cos(x)
    flux1 = lambda x: kappa_fn(x, w2) * R(x) * _d(lambda t: u_fn(t, w2), x)
    flux2 = lambda y: kappa_fn(w1, y) / R(w1) * _d(lambda t: u_fn(w1, t), y)
    return -(_d(flux1, w1) + _d(flux2, w2)) / R(w1)


def torus_truth(n1, n2):
    from .pointcloud import generate_torus

    pc = generate_torus(n1, n2)
    w1, w2 = pc.params[:, 0], pc.params[:, 1]
    kfn = lambda x, y: 2.0 + np.sin(x) * np.sin(y)
    ufn = lambda x, y: np.sin(x) * np.sin(y)
    f = torus_source(w1, w2)
    err = _check_fd(f, torus_source_fd(w1, w2, kfn, ufn), "torus")
    return SyntheticTruth(kfn(w1, w2), ufn(w1, w2), f, {"kind": "torus", "fd_rel_err": err})


# ---------------------------------------------------------------------------
# ellipse with a fixed source (hierarchical experiment)
# ---------------------------------------------------------------------------

def _periodic_antiderivative(h):
    N = len(h)
    k = np.fft.fftfreq(N, 1.0 / N)
    Hk = np.fft.fft(h)
    Hk[0] = 0.0
    Hk[1:] /= 1j * k[1:]
    if N % 2 == 0:
        Hk[N // 2] = 0.0
    return np.real(np.fft.ifft(Hk))


def solve_ellipse_1d(kappa_fn, f_fn, N, a=3.0):
    """Reference solution of -div(kappa grad u) = f on the ellipse.

    Integrates the 1-d flux equation exactly with spectral antiderivatives on
    an N-point periodic grid; u is returned with zero chart-weighted mean.
    """
    w = 2.0 * np.pi * np.arange(N) / N
    sg = np.sqrt(np.sin(w) ** 2 + a * a * np.cos(w) ** 2)
    src = sg * f_fn(w)
    if abs(src.mean()) > 1e-10 * max(np.abs(src).max(), 1e-300):
        raise TruthError("source has nonzero chart-weighted mean; no periodic solution")
    kappa = kappa_fn(w)
    F = _periodic_antiderivative(src)
    C = np.mean(sg * F / kappa) / np.mean(sg / kappa)
    u = _periodic_antiderivative(sg * (C - F) / kappa)
    return w, u - np.sum(u * sg) / np.sum(sg)


def hierarchical_truth(n, freq, a=3.0, fine_factor=4, f_amp=0.2):
    """kappa = exp(cos(freq w)), f = f_amp sin w; u from a fine-grid solve restricted to n."""
    kfn = lambda w: np.exp(np.cos(freq * w))
    ffn = lambda w: f_amp * np.sin(w)
    _, u_fine = solve_ellipse_1d(kfn, ffn, fine_factor * n, a)
    w = 2.0 * np.pi * np.arange(n) / n
    return SyntheticTruth(
        kfn(w), u_fine[::fine_factor].copy(), ffn(w),
        {"kind": "hier_ellipse", "freq": freq, "fine_factor": fine_factor, "a": a},
    )


# ---------------------------------------------------------------------------
# externally supplied surface (cow)
# ---------------------------------------------------------------------------

def cow_truth(full_pc, gl_full, tau, s, epsilon, seed, n_sub=1000, u_scale=10.0,
              sub_seed=None, sq_dists_full=None):
    """Truth generated on the full cloud and restricted to a random subset.

    theta ~ graph prior on the full cloud, u = u_scale (phi_2 - c) with phi_2
    the second Laplacian eigenvector, f = L^{kappa}_{eps, full} u. The shift c
    makes u q-mean-zero for the subset's density estimate. Returns
    ``(truth_on_subset, subset_cloud, indices, extras)``.
    """
    rng = np.random.default_rng(seed)
    prior = build_prior(gl_full, tau, s)
    theta = sample_prior(prior, rng)
    kappa = np.exp(theta)
    phi2 = gl_full.eigvecs[:, 1]
    if sq_dists_full is None:
        sq_dists_full = pairwise_sq_dists(full_pc)
    op_full = assemble_operator(full_pc, kappa, epsilon, sq_dists_full)
    f_full = op_full.L @ (u_scale * phi2)
    sub_pc, idx = subsample(full_pc, n_sub, seed if sub_seed is None else sub_seed)
    q_sub = density_estimate(kernel_matrix(sq_dists_full[np.ix_(idx, idx)], epsilon), epsilon, full_pc.m)
    u_sub = _q_shift(u_scale * phi2[idx], q_sub)
    truth = SyntheticTruth(
        kappa[idx], u_sub, f_full[idx],
        {"kind": "cow", "tau": tau, "s": s, "k_full": gl_full.k, "n_full": full_pc.n, "n_sub": n_sub},
    )
    return truth, sub_pc, idx, {"theta_full": theta, "f_full": f_full}


# ---------------------------------------------------------------------------
# noise and metrics
# ---------------------------------------------------------------------------

def add_noise(clean, sigma, rng):
    if sigma < 0:
        raise ValueError(f"noise sigma must be nonnegative, got {sigma}")
    clean = np.asarray(clean, dtype=float)
    return clean + sigma * rng.standard_normal(clean.shape)


def relative_error(estimate, truth):
    """100 * |estimate - truth|_2 / |truth|_2."""
    estimate, truth = np.asarray(estimate, dtype=float), np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise ValueError(f"shape mismatch {estimate.shape} vs {truth.shape}")
    nt = np.linalg.norm(truth)
    if nt == 0:
        raise ValueError("truth has zero norm")
    return 100.0 * float(np.linalg.norm(estimate - truth) / nt)


def relative_noise_level(sigma, u_true):
    """100 * sqrt(n) sigma / |u_true|_2."""
    return 100.0 * float(np.sqrt(len(u_true)) * sigma / np.linalg.norm(u_true))
