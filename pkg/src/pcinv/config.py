"""Experiment configuration: JSON sections with validated fields and dotted overrides."""
from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass
class CloudConfig:
    kind: str = "ellipse"  # ellipse | torus | file
    n: int = 400
    a: float = 3.0
    n1: int = 20
    n2: int = 20
    path: str | None = None
    d: int = 3
    m: int = 2
    subsample: int | None = None


@dataclass
class TruthConfig:
    kind: str = "ellipse"  # ellipse | torus | cow | hier_ellipse
    freq: int = 1
    f_amp: float = 0.2
    fine_factor: int = 4
    tau: float = 0.7
    s: float = 6.0
    k: int = 100
    u_scale: float = 10.0


@dataclass
class OperatorConfig:
    epsilon: float | str = "dimension"  # number | "dimension" | "slope_max"
    eps_lo: float = 1e-4
    eps_hi: float = 1e1
    eps_num: int = 40
    solver: str = "chol"
    rtol: float = 1e-10


@dataclass
class ObservationConfig:
    J: int | None = None
    sigma: float | None = 0.01
    noise_level: float | None = None  # relative: sigma = level * |u|_2 / sqrt(n)


@dataclass
class PriorConfig:
    k: int = 2
    tau: float = 0.05
    s: float = 4.0
    hierarchical: bool = False
    pi0_mean: float = 2.0
    pi0_std: float = 1.0
    tau0: float | None = None


@dataclass
class SamplerSection:
    iters: int = 200_000
    burnin: int = 50_000
    thin: int = 10
    beta: float = 0.02
    adapt: bool = True
    adapt_interval: int = 100
    tau_step: float = 0.2
    theta0: str = "prior"  # prior | zero | map
    map_modes: int = 100
    chains: int = 1


@dataclass
class OutputConfig:
    dir: str = "runs/out"
    write_trace: bool = True


_SECTIONS = {
    "cloud": CloudConfig,
    "truth": TruthConfig,
    "operator": OperatorConfig,
    "observations": ObservationConfig,
    "prior": PriorConfig,
    "sampler": SamplerSection,
    "output": OutputConfig,
}


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    cloud: CloudConfig = field(default_factory=CloudConfig)
    truth: TruthConfig = field(default_factory=TruthConfig)
    operator: OperatorConfig = field(default_factory=OperatorConfig)
    observations: ObservationConfig = field(default_factory=ObservationConfig)
    prior: PriorConfig = field(default_factory=PriorConfig)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        top = {}
        for key, value in data.items():
            if key in ("name", "seed"):
                top[key] = value
            elif key in _SECTIONS:
                top[key] = _build_section(key, value)
            else:
                raise ConfigError(f"unknown configuration key {key!r}")
        cfg = cls(**top)
        cfg.validate()
        return cfg

    def validate(self):
        c, t, o, ob, p, s = (self.cloud, self.truth, self.operator, self.observations,
                             self.prior, self.sampler)
        _choice("cloud.kind", c.kind, ("ellipse", "torus", "file"))
        _choice("truth.kind", t.kind, ("ellipse", "torus", "cow", "hier_ellipse"))
        _choice("operator.solver", o.solver, ("chol", "pinv", "eig"))
        _choice("sampler.theta0", s.theta0, ("prior", "zero", "map"))
        if c.kind == "file" and not c.path:
            raise ConfigError("cloud.path is required when cloud.kind is 'file'")
        if t.kind == "cow" and c.kind != "file":
            raise ConfigError("truth.kind 'cow' needs cloud.kind 'file'")
        if t.kind in ("ellipse", "hier_ellipse") and c.kind != "ellipse":
            raise ConfigError(f"truth.kind {t.kind!r} needs cloud.kind 'ellipse'")
        if t.kind == "torus" and c.kind != "torus":
            raise ConfigError("truth.kind 'torus' needs cloud.kind 'torus'")
        if isinstance(o.epsilon, str):
            _choice("operator.epsilon", o.epsilon, ("dimension", "slope_max"))
        elif not (isinstance(o.epsilon, (int, float)) and o.epsilon > 0):
            raise ConfigError(f"operator.epsilon must be positive, got {o.epsilon!r}")
        if not 0 < o.eps_lo < o.eps_hi or o.eps_num < 2:
            raise ConfigError("operator eps grid needs 0 < eps_lo < eps_hi and eps_num >= 2")
        if (ob.sigma is None) == (ob.noise_level is None):
            raise ConfigError("give exactly one of observations.sigma or observations.noise_level")
        if ob.sigma is not None and ob.sigma <= 0:
            raise ConfigError("observations.sigma must be positive")
        if p.tau <= 0 or p.s <= 0 or p.k < 1:
            raise ConfigError("prior needs tau > 0, s > 0, k >= 1")
        if p.hierarchical and p.pi0_std <= 0:
            raise ConfigError("prior.pi0_std must be positive")
        if s.iters <= s.burnin or s.burnin < 0 or s.thin < 1 or not 0 < s.beta < 1:
            raise ConfigError("sampler needs iters > burnin >= 0, thin >= 1, 0 < beta < 1")
        if s.chains < 1 or s.map_modes < 1:
            raise ConfigError("sampler.chains and sampler.map_modes must be >= 1")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {self.seed!r}")


def _choice(name, value, allowed):
    if value not in allowed:
        raise ConfigError(f"{name} must be one of {allowed}, got {value!r}")


def _build_section(name, values):
    cls = _SECTIONS[name]
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown key {name}.{key}")
    return cls(**values)


def load_config(path, overrides=()):
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    data = apply_overrides(data, overrides)
    return ExperimentConfig.from_dict(data)


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data, overrides):
    """Apply ``section.key=value`` strings to a raw config dict (values parsed as JSON)."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) == 1 and parts[0] in ("name", "seed"):
            data[parts[0]] = _parse_value(raw)
            continue
        if len(parts) != 2 or parts[0] not in _SECTIONS:
            raise ConfigError(f"unknown override key {key!r}")
        section, field_name = parts
        known = {f.name for f in dataclasses.fields(_SECTIONS[section])}
        if field_name not in known:
            raise ConfigError(f"unknown override key {key!r}")
        data.setdefault(section, {})[field_name] = _parse_value(raw)
    return data


def derive_seed(root, label):
    """Stage seed from the root seed and a stage label (stable across runs)."""
    ss = np.random.SeedSequence(entropy=int(root), spawn_key=(zlib.crc32(label.encode()),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])
