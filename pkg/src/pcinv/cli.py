"""Command-line interface: ``pcinv <subcommand> --config cfg.json [options]``.

stdout carries data tables only; diagnostics go to stderr.
Exit status: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .experiments import (
    StageError,
    _json_default,
    build_cloud,
    build_report,
    forward_error,
    merge_traces,
    prepare,
    run_experiment,
    summarize,
    write_summary_csv,
)
from .kernel_operator import bandwidth_diagnostic, default_eps_grid
from .mcmc import ChainTrace, read_trace_csv
from .pointcloud import PointCloudError, pairwise_sq_dists

log = logging.getLogger("pcinv")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _common(p, config_required=True):
    p.add_argument("--config", required=config_required, help="experiment configuration (JSON)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. sampler.iters=1000 (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="root seed (overrides config)")
    p.add_argument("--out", default=None, help="output directory (overrides output.dir)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="pcinv", description="Bayesian inversion of a diffusion coefficient on a point cloud.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write the point cloud and synthetic truth as CSV")
    _common(p)

    p = sub.add_parser("tune-eps", help="print the T(eps) bandwidth table as CSV")
    _common(p)
    p.add_argument("--eps-lo", type=float, default=None, help="grid start, in units of median squared distance")
    p.add_argument("--eps-hi", type=float, default=None)
    p.add_argument("--num", type=int, default=None)

    p = sub.add_parser("forward", help="solve with the true diffusion and report the forward error")
    _common(p)
    p.add_argument("--solver", choices=("chol", "pinv", "eig"), default=None)
    p.add_argument("--epsilon", type=float, default=None, help="pin the bandwidth")

    for name, helptext in (("sample", "pCN posterior sampling with a fixed prior"),
                           ("hierarchical", "Metropolis-within-Gibbs over (theta, tau)")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--chains", type=int, default=None, help="independent chains with derived seeds")

    p = sub.add_parser("report", help="rebuild report.json and summary.csv from a finished run directory")
    p.add_argument("--run-dir", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _load(args, extra=()):
    overrides = list(args.override) + list(extra)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"output.dir={json.dumps(args.out)}")
    return load_config(args.config, overrides)


def cmd_generate(args):
    cfg = _load(args)
    problem = prepare(cfg)
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    pc, truth = problem.pc, problem.truth
    n_par = 0 if pc.params is None else pc.params.shape[1]
    with open(out / "cloud.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(pc.d)] + [f"omega{i + 1}" for i in range(n_par)]
                   + ["kappa_true", "u_true", "f"])
        for i in range(pc.n):
            row = list(pc.points[i]) + ([] if n_par == 0 else list(pc.params[i]))
            row += [truth.kappa_true[i], truth.u_true[i], truth.f[i]]
            w.writerow([repr(float(v)) for v in row])
    print(f"wrote {out / 'cloud.csv'} (n={pc.n}, d={pc.d}, m={pc.m})", file=sys.stderr)
    return EXIT_OK


def cmd_tune_eps(args):
    cfg = _load(args)
    pc = build_cloud(cfg)
    D2 = pairwise_sq_dists(pc)
    op = cfg.operator
    grid = default_eps_grid(
        D2,
        op.eps_lo if args.eps_lo is None else args.eps_lo,
        op.eps_hi if args.eps_hi is None else args.eps_hi,
        op.eps_num if args.num is None else args.num,
    )
    diag = bandwidth_diagnostic(D2, grid, pc.m)
    w = csv.writer(sys.stdout)
    w.writerow(["epsilon", "T", "slope"])
    for e, t, s in diag.rows():
        w.writerow([repr(e), repr(t), repr(s)])
    print(f"suggested epsilon (max slope): {diag.eps_star!r}", file=sys.stderr)
    print(f"epsilon where slope reaches m/2: {diag.eps_dim!r}", file=sys.stderr)
    return EXIT_OK


def cmd_forward(args):
    extra = []
    if args.solver:
        extra.append(f"operator.solver={args.solver}")
    if args.epsilon is not None:
        extra.append(f"operator.epsilon={args.epsilon!r}")
    cfg = _load(args, extra)
    problem = prepare(cfg)
    err, res = forward_error(problem)
    w = csv.writer(sys.stdout)
    w.writerow(["node", "u", "u_true"])
    for i in range(problem.pc.n):
        w.writerow([i, repr(float(res.u[i])), repr(float(problem.truth.u_true[i]))])
    print(f"epsilon={problem.epsilon!r} solver={cfg.operator.solver} forward error={err:.4f}% "
          f"residual={res.residual:.3e} discarded rhs={res.discarded:.3e}", file=sys.stderr)
    return EXIT_OK


def _cmd_run(args, hierarchical):
    extra = [f"prior.hierarchical={'true' if hierarchical else 'false'}"]
    if args.chains is not None:
        extra.append(f"sampler.chains={args.chains}")
    cfg = _load(args, extra)
    report = run_experiment(cfg)
    msg = (f"kappa error {report['kappa_error']:.3f}%  u error {report['u_error']:.3f}%  "
           f"noise level {report['noise_level']:.3f}%  acceptance {report['acceptance']}")
    print(msg, file=sys.stderr)
    print(f"outputs in {cfg.output.dir}", file=sys.stderr)
    return EXIT_OK


def cmd_report(args):
    run = Path(args.run_dir)
    try:
        old = json.loads((run / "report.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {run / 'report.json'}: {exc}") from exc
    cfg = ExperimentConfig.from_dict(old["config"])
    problem = prepare(cfg)
    files = sorted(run.glob("trace_chain*.csv")) or [run / "trace.csv"]
    traces = []
    for path, chain in zip(files, old.get("chains", [{}] * len(files))):
        if not path.exists():
            raise ConfigError(f"missing trace file {path}")
        it, ll, tau, theta = read_trace_csv(path)
        traces.append(ChainTrace(it, theta, ll, tau, chain.get("accepted", {}),
                                 chain.get("proposed", {}), chain.get("failed_proposals", 0),
                                 chain.get("tuning", []), chain.get("seed"), chain.get("beta"),
                                 chain.get("tau_step")))
    trace = merge_traces(traces)
    k_stats, _, u_mean = summarize(problem, trace)
    report = build_report(problem, traces, trace, k_stats, u_mean, old.get("elapsed_seconds", 0.0))
    (run / "report.json").write_text(json.dumps(report, indent=2, default=_json_default))
    write_summary_csv(run / "summary.csv", problem, k_stats, u_mean)
    print(f"kappa error {report['kappa_error']:.3f}%  u error {report['u_error']:.3f}%", file=sys.stderr)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "tune-eps": cmd_tune_eps,
    "forward": cmd_forward,
    "sample": lambda a: _cmd_run(a, hierarchical=False),
    "hierarchical": lambda a: _cmd_run(a, hierarchical=True),
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, PointCloudError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except StageError as exc:
        cause = exc.__cause__
        if isinstance(cause, (ConfigError, PointCloudError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RuntimeError, ValueError, np.linalg.LinAlgError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
