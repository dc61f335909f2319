"""Time the numba and numpy kernel paths, and split one forward solve into assembly and factorization.

Usage: python benchmarks/bench_kernels.py [--n 400] [--repeat 20]
"""
import argparse
import timeit

import numpy as np
import scipy.linalg

from pcinv import _kernels
from pcinv.forward import ForwardModel, ObservationMap
from pcinv.kernel_operator import kernel_matrix
from pcinv.pointcloud import generate_ellipse
from pcinv.truth import ellipse_truth

KERNELS = ("sq_dists", "weighted_matrix", "symmetric_operator", "similarity", "kernel_sum")


def best(fn, repeat):
    fn()  # warm up (numba compiles on first call)
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=400)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    pc = generate_ellipse(args.n, 3.0)
    X = np.ascontiguousarray(pc.points)
    D2 = _kernels.sq_dists_numpy(X)
    eps = 6e-4
    H = kernel_matrix(D2, eps)
    Q = H.sum(axis=1)
    sk = np.exp(0.5 * np.random.default_rng(0).normal(size=args.n))
    knn = np.sqrt(np.sort(D2, axis=1)[:, 2])
    inputs = {
        "sq_dists": (X,),
        "weighted_matrix": (H, Q, sk),
        "symmetric_operator": (H, Q, sk),
        "similarity": (D2, knn),
        "kernel_sum": (D2, eps),
    }

    print(f"n={args.n}, numba available: {_kernels.HAVE_NUMBA}, active backend: {_kernels.backend()}")
    print(f"{'kernel':<20}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name in KERNELS:
        a = inputs[name]
        t_np = best(lambda: getattr(_kernels, f"{name}_numpy")(*a), args.repeat)
        t_nb = best(lambda: getattr(_kernels, f"{name}_numba")(*a), args.repeat)
        print(f"{name:<20}{1e3 * t_np:>12.3f}{1e3 * t_nb:>12.3f}{t_np / t_nb:>10.2f}")

    truth = ellipse_truth(args.n, 3.0)
    model = ForwardModel(pc, eps, truth.f, ObservationMap.strided(args.n, args.n), sq_dists=D2)
    A = _kernels.symmetric_operator(H, Q, sk)
    A += np.mean(np.diag(A)) * np.outer(1 / np.sqrt(Q), 1 / np.sqrt(Q)) / np.sum(1 / Q)
    theta = np.log(truth.kappa_true)
    t_asm = best(lambda: _kernels.symmetric_operator(H, Q, sk), args.repeat)
    t_chol = best(lambda: scipy.linalg.cho_factor(A, lower=True, check_finite=False), args.repeat)
    t_solve = best(lambda: model.solve(theta), args.repeat)
    print(f"\nforward solve ({_kernels.backend()}): total {1e3 * t_solve:.3f} ms, "
          f"assembly {1e3 * t_asm:.3f} ms, Cholesky {1e3 * t_chol:.3f} ms "
          f"({100 * t_chol / t_solve:.0f}% of the solve)")


if __name__ == "__main__":
    main()
