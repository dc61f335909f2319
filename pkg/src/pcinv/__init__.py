"""Mesh-free Bayesian inversion of diffusion coefficients on point clouds.

The forward model is a kernel-based discretisation of ``-div(kappa grad u) = f``
built directly on sampled points; the prior on ``theta = log kappa`` is a
Gaussian field defined through a self-tuning graph Laplacian, and posteriors
are explored with pCN (optionally inside a Gibbs sweep over the prior scale).
"""
from ._kernels import backend
from .config import ConfigError, ExperimentConfig, load_config
from .experiments import StageError, prepare, run_experiment
from .forward import ForwardModel, ObservationMap, SolverError, forward_map, solve
from .kernel_operator import (
    DiscreteOperator,
    OperatorError,
    assemble_operator,
    bandwidth_diagnostic,
    density_estimate,
    kernel_matrix,
)
from .mcmc import Likelihood, NormalHyperprior, SamplerConfig, run_gibbs, run_pcn
from .pointcloud import (
    PointCloud,
    PointCloudError,
    generate_ellipse,
    generate_torus,
    load_pointcloud,
    subsample,
)
from .prior import GraphPrior, build_prior, sample_prior, self_tuning_laplacian

__version__ = "0.1.0"

__all__ = [
    "backend", "ConfigError", "ExperimentConfig", "load_config", "StageError", "prepare",
    "run_experiment", "ForwardModel", "ObservationMap", "SolverError", "forward_map", "solve",
    "DiscreteOperator", "OperatorError", "assemble_operator", "bandwidth_diagnostic",
    "density_estimate", "kernel_matrix", "Likelihood", "NormalHyperprior", "SamplerConfig",
    "run_gibbs", "run_pcn", "PointCloud", "PointCloudError", "generate_ellipse",
    "generate_torus", "load_pointcloud", "subsample", "GraphPrior", "build_prior",
    "sample_prior", "self_tuning_laplacian",
]
