"""End-to-end runs: cloud -> truth -> operator -> data -> prior -> sampler -> report."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .config import ExperimentConfig, derive_seed
from .forward import ForwardModel, ObservationMap, SolverError, solve
from .kernel_operator import (
    assemble_operator,
    bandwidth_diagnostic,
    default_eps_grid,
)
from .mcmc import (
    ChainTrace,
    Likelihood,
    NormalHyperprior,
    SamplerConfig,
    map_estimate,
    posterior_summary,
    run_gibbs,
    run_pcn,
)
from .pointcloud import (
    generate_ellipse,
    generate_torus,
    load_pointcloud,
    pairwise_sq_dists,
)
from .prior import build_prior, laplacian_from_sq_dists
from .truth import (
    add_noise,
    cow_truth,
    ellipse_truth,
    hierarchical_truth,
    relative_error,
    relative_noise_level,
    torus_truth,
)

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """Pipeline failure tagged with the stage it happened in."""

    def __init__(self, stage, exc):
        super().__init__(f"[{stage}] {exc}")
        self.stage = stage


class _stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)

    def __exit__(self, typ, exc, tb):
        if exc is not None and not isinstance(exc, StageError) and isinstance(exc, Exception):
            raise StageError(self.name, exc) from exc
        return False


@dataclass
class Problem:
    cfg: ExperimentConfig
    pc: object
    truth: object
    sq_dists: np.ndarray
    epsilon: float
    eps_diag: object
    obs: ObservationMap
    y: np.ndarray
    sigma: float
    gl: object
    prior: object
    model: ForwardModel
    lik: Likelihood
    seeds: dict
    extras: dict


def choose_epsilon(op_cfg, sq_dists, m):
    grid = default_eps_grid(sq_dists, op_cfg.eps_lo, op_cfg.eps_hi, op_cfg.eps_num)
    diag = bandwidth_diagnostic(sq_dists, grid, m)
    if isinstance(op_cfg.epsilon, str):
        if op_cfg.epsilon == "slope_max":
            return diag.eps_star, diag
        if diag.eps_dim is None:
            raise ValueError("log T slope never reaches m/2 on the bandwidth grid; pin operator.epsilon")
        return diag.eps_dim, diag
    return float(op_cfg.epsilon), diag


def build_cloud(cfg):
    c = cfg.cloud
    if c.kind == "ellipse":
        return generate_ellipse(c.n, c.a)
    if c.kind == "torus":
        return generate_torus(c.n1, c.n2)
    return load_pointcloud(c.path, c.d, c.m)


def prepare(cfg):
    """Everything up to (not including) sampling."""
    seeds = {lab: derive_seed(cfg.seed, lab) for lab in ("truth", "subsample", "noise", "chain")}
    extras = {}
    with _stage("cloud"):
        pc = build_cloud(cfg)
        if cfg.cloud.kind == "file":
            lo, hi = pc.bounding_box()
            extras["bounding_box"] = [lo.tolist(), hi.tolist()]
            extras["n_full"] = pc.n
    with _stage("truth"):
        t = cfg.truth
        if t.kind == "ellipse":
            truth = ellipse_truth(cfg.cloud.n, cfg.cloud.a)
        elif t.kind == "torus":
            truth = torus_truth(cfg.cloud.n1, cfg.cloud.n2)
        elif t.kind == "hier_ellipse":
            truth = hierarchical_truth(cfg.cloud.n, t.freq, cfg.cloud.a, t.fine_factor, t.f_amp)
        else:
            full = pc
            D2_full = pairwise_sq_dists(full)
            n_sub = cfg.cloud.subsample or full.n
            rng = np.random.default_rng(seeds["subsample"])
            idx = np.sort(rng.choice(full.n, size=n_sub, replace=False))
            D2_sub = D2_full[np.ix_(idx, idx)]
            eps, _ = choose_epsilon(cfg.operator, D2_sub, full.m)
            gl_full = laplacian_from_sq_dists(D2_full, t.k)
            truth, pc, idx2, more = cow_truth(
                full, gl_full, t.tau, t.s, eps, seeds["truth"], n_sub, t.u_scale,
                sub_seed=seeds["subsample"], sq_dists_full=D2_full,
            )
            assert np.array_equal(idx, idx2)
            extras["subset_indices"] = idx.tolist()
    with _stage("operator"):
        D2 = pairwise_sq_dists(pc)
        epsilon, diag = choose_epsilon(cfg.operator, D2, pc.m)
    with _stage("observations"):
        ob = cfg.observations
        J = pc.n if ob.J is None else int(ob.J)
        obs = ObservationMap.strided(pc.n, J)
        if ob.sigma is not None:
            sigma = float(ob.sigma)
        else:
            sigma = float(ob.noise_level * np.linalg.norm(truth.u_true) / np.sqrt(pc.n))
        clean = truth.u_true[obs.indices]
        y = add_noise(clean, sigma, np.random.default_rng(seeds["noise"]))
    with _stage("prior"):
        p = cfg.prior
        gl = laplacian_from_sq_dists(D2, p.k)
        prior = build_prior(gl, p.tau0 if (p.hierarchical and p.tau0) else p.tau, p.s)
    with _stage("forward"):
        model = ForwardModel(pc, epsilon, truth.f, obs, cfg.operator.solver, cfg.operator.rtol, D2)
        lik = Likelihood(y, model, sigma=sigma)
    return Problem(cfg, pc, truth, D2, epsilon, diag, obs, y, sigma, gl, prior, model, lik, seeds, extras)


def _sampler_config(cfg, seed):
    s = cfg.sampler
    return SamplerConfig(s.iters, s.burnin, s.thin, s.beta, seed, s.adapt, s.adapt_interval, s.tau_step)


def chain_seeds(cfg, seeds):
    if cfg.sampler.chains == 1:
        return [seeds["chain"]]
    return [derive_seed(seeds["chain"], f"chain{i}") for i in range(cfg.sampler.chains)]


def initial_theta(problem):
    """Chain start shared by all chains; None means a prior draw per chain."""
    start = problem.cfg.sampler.theta0
    if start == "zero":
        return np.zeros(problem.pc.n)
    if start == "map":
        return map_estimate(problem.prior, problem.lik, problem.cfg.sampler.map_modes)
    return None


def run_chain(problem, seed, progress=None, theta0=None):
    cfg = problem.cfg
    scfg = _sampler_config(cfg, seed)
    if cfg.prior.hierarchical:
        pi0 = NormalHyperprior(cfg.prior.pi0_mean, cfg.prior.pi0_std)
        return run_gibbs(scfg, problem.gl, cfg.prior.s, pi0, problem.lik, theta0,
                         cfg.prior.tau0, progress)
    return run_pcn(scfg, problem.prior, problem.lik, theta0, progress)


def merge_traces(traces):
    if len(traces) == 1:
        return traces[0]
    cat = lambda name: np.concatenate([getattr(t, name) for t in traces])
    tau = None if traces[0].tau is None else cat("tau")
    keys = traces[0].proposed.keys()
    return ChainTrace(
        cat("iterations"), np.vstack([t.theta for t in traces]), cat("loglik"), tau,
        {k: sum(t.accepted[k] for t in traces) for k in keys},
        {k: sum(t.proposed[k] for t in traces) for k in keys},
        sum(t.failed for t in traces), [], None, None, None,
    )


def forward_error(problem):
    """Relative error (%) of the discrete solve with the true kappa against u_true."""
    op = assemble_operator(problem.pc, problem.truth.kappa_true, problem.epsilon, problem.sq_dists)
    res = solve(op, problem.truth.f, problem.cfg.operator.solver, problem.cfg.operator.rtol)
    return relative_error(res.u, problem.truth.u_true), res


def summarize(problem, trace):
    k_stats = posterior_summary(trace, "exp")
    th_stats = posterior_summary(trace, "identity")
    kappa_mean = k_stats["mean"]
    try:
        u_mean = problem.model.solve(np.log(kappa_mean))
    except SolverError:
        u_mean = np.full(problem.pc.n, np.nan)
    return k_stats, th_stats, u_mean


def build_report(problem, traces, trace, k_stats, u_mean, elapsed):
    truth = problem.truth
    cfg = problem.cfg
    fe, fres = forward_error(problem)
    report = {
        "name": cfg.name,
        "backend": _kernels.backend(),
        "n": problem.pc.n,
        "epsilon": problem.epsilon,
        "epsilon_rule": cfg.operator.epsilon if isinstance(cfg.operator.epsilon, str) else "pinned",
        "eps_star_slope_max": problem.eps_diag.eps_star,
        "eps_dimension": problem.eps_diag.eps_dim,
        "sigma": problem.sigma,
        "J": problem.obs.J,
        "kappa_error": relative_error(k_stats["mean"], truth.kappa_true),
        "u_error": relative_error(u_mean, truth.u_true) if np.isfinite(u_mean).all() else None,
        "noise_level": relative_noise_level(problem.sigma, truth.u_true),
        "forward_error": fe,
        "rhs_discarded_norm": fres.discarded,
        "n_samples": trace.n_samples,
        "acceptance": {k: trace.acceptance_rate(k) for k in trace.proposed},
        "chains": [t.summary() for t in traces],
        "seeds": {"root": cfg.seed, **problem.seeds},
        "elapsed_seconds": elapsed,
        "truth_meta": truth.meta,
        "config": cfg.to_dict(),
    }
    if trace.tau is not None and trace.n_samples:
        report["tau"] = {
            "mean": float(trace.tau.mean()),
            "min": float(trace.tau.min()),
            "max": float(trace.tau.max()),
        }
    report.update({k: v for k, v in problem.extras.items() if k != "subset_indices"})
    return report


def write_summary_csv(path, problem, k_stats, u_mean):
    pc, truth = problem.pc, problem.truth
    n_par = 0 if pc.params is None else pc.params.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node"] + [f"omega{i + 1}" for i in range(n_par)]
                   + ["kappa_true", "kappa_mean", "kappa_q025", "kappa_q975", "u_true", "u_mean"])
        for i in range(pc.n):
            par = [] if n_par == 0 else [repr(float(v)) for v in pc.params[i]]
            w.writerow([i] + par + [repr(float(v)) for v in (
                truth.kappa_true[i], k_stats["mean"][i], k_stats["q025"][i], k_stats["q975"][i],
                truth.u_true[i], u_mean[i])])


def run_experiment(cfg, out_dir=None, progress=None):
    """Run the full pipeline, write report.json / summary.csv / trace*.csv, return the report."""
    t0 = time.perf_counter()
    problem = prepare(cfg)
    traces = []
    with _stage("sampler"):
        theta0 = initial_theta(problem)
        for seed in chain_seeds(cfg, problem.seeds):
            traces.append(run_chain(problem, seed, progress, theta0))
    trace = merge_traces(traces)
    with _stage("summary"):
        k_stats, _, u_mean = summarize(problem, trace)
        report = build_report(problem, traces, trace, k_stats, u_mean, time.perf_counter() - t0)
    out = Path(out_dir or cfg.output.dir)
    with _stage("output"):
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(report, indent=2, default=_json_default))
        write_summary_csv(out / "summary.csv", problem, k_stats, u_mean)
        if cfg.output.write_trace:
            if len(traces) == 1:
                traces[0].write_csv(out / "trace.csv")
            else:
                for i, t in enumerate(traces):
                    t.write_csv(out / f"trace_chain{i}.csv")
    report["_problem"] = problem
    report["_trace"] = trace
    return report


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")
