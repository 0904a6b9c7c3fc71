"""Experiment configuration: defaults, JSON round-trip, validation.

Configs are plain dataclasses resolved to canonical JSON; the hash of that
JSON identifies a run in the manifest.  Unknown keys in a config file are
rejected rather than ignored.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .optimizer import GNConfig

ISOTROPIC = "isotropic"
ANISOTROPIC = "anisotropic"

# Box counts per axis used in the published-scale runs.
PAPER_RESOLUTIONS = {
    ISOTROPIC: {"synthesis": (50, 50, 10), "inversion": (30, 30, 6)},
    ANISOTROPIC: {"synthesis": (50, 50, 50), "inversion": (30, 30, 30)},
}

# Desk-scale meshes: the coarsest grids at which the reference inversion
# (true conductivity, noise-only likelihood) still yields feasible
# posteriors, i.e. coarse-grid model error stays near the 1% noise floor.
# The horizontally rough isotropic draw needs in-plane resolution; the
# vertically stratified anisotropic draw needs layers instead.
DESK_RESOLUTIONS = {
    ISOTROPIC: {"synthesis": (40, 40, 8), "inversion": (20, 20, 4)},
    ANISOTROPIC: {"synthesis": (32, 32, 30), "inversion": (16, 16, 24)},
}


@dataclass
class PriorSpec:
    """Parameters of one elliptic-operator prior."""

    alpha: float
    gamma: object  # scalar or per-axis diagonal list
    kappa: float = 0.0
    mean: float = 0.0
    bc_variant: str = "neumann"


@dataclass
class ExperimentConfig:
    case: str = ISOTROPIC
    dim: int = 3
    length: float = 1.0
    thickness: float = 0.01
    synthesis_resolution: tuple = (40, 40, 8)
    inversion_resolution: tuple = (20, 20, 4)
    beta_prior: PriorSpec = field(
        default_factory=lambda: PriorSpec(alpha=7.0, gamma=0.01, kappa=0.0,
                                          mean=1.0, bc_variant="weighted")
    )
    a_prior: PriorSpec = field(
        default_factory=lambda: PriorSpec(alpha=100.0, gamma=1e-3, kappa=0.0,
                                          mean=0.0, bc_variant="neumann")
    )
    noise_percent: float = 1.0
    flux: float = 1.0
    observation_points: list | None = None  # default layout when None
    bae_samples: int = 1000
    master_seed: int = 1842
    optimizer: GNConfig = field(default_factory=lambda: GNConfig(max_gn_iters=50))
    eig_oversample: int = 10
    truncate_above: float = 0.1
    cross_section_samples: int = 101
    output_dir: str = "out"


def default_config(case=ISOTROPIC, dim=3, paper_scale=False):
    cfg = ExperimentConfig(case=case, dim=dim)
    res = (PAPER_RESOLUTIONS if paper_scale else DESK_RESOLUTIONS)[case]
    cfg.synthesis_resolution = _fit_dim(res["synthesis"], dim)
    cfg.inversion_resolution = _fit_dim(res["inversion"], dim)
    if case == ANISOTROPIC:
        cfg.a_prior.gamma = [1e-2] * (dim - 1) + [1e-8]
    validate_config(cfg)
    return cfg


def _fit_dim(res, dim):
    return tuple(res) if dim == 3 else (res[0], res[-1])


def validate_config(cfg):
    if cfg.case not in (ISOTROPIC, ANISOTROPIC):
        raise ValueError(f"unknown case {cfg.case!r}")
    if cfg.dim not in (2, 3):
        raise ValueError(f"dim must be 2 or 3, got {cfg.dim}")
    if cfg.length <= 0 or cfg.thickness <= 0:
        raise ValueError("length and thickness must be positive")
    n_axes = cfg.dim
    for name in ("synthesis_resolution", "inversion_resolution"):
        res = tuple(getattr(cfg, name))
        if len(res) != n_axes or any(int(v) != v or v < 1 for v in res):
            raise ValueError(f"{name} must be {n_axes} positive integers, got {res}")
        setattr(cfg, name, res)
    fine, coarse = cfg.synthesis_resolution, cfg.inversion_resolution
    if not all(f > c for f, c in zip(fine, coarse)):
        raise ValueError(
            f"synthesis mesh {fine} must be strictly finer than the inversion "
            f"mesh {coarse} in every axis"
        )
    if cfg.noise_percent <= 0:
        raise ValueError(f"noise_percent must be positive, got {cfg.noise_percent}")
    if cfg.bae_samples < 2:
        raise ValueError(f"bae_samples must be at least 2, got {cfg.bae_samples}")
    for spec, expected_dim in ((cfg.beta_prior, cfg.dim - 1), (cfg.a_prior, cfg.dim)):
        gamma = spec.gamma
        if isinstance(gamma, (list, tuple)) and len(gamma) != expected_dim:
            raise ValueError(
                f"prior gamma {gamma} has {len(gamma)} entries, expected {expected_dim}"
            )
    if cfg.observation_points is not None:
        for p in cfg.observation_points:
            if len(p) != cfg.dim:
                raise ValueError(f"observation point {p} is not {cfg.dim}-dimensional")
    return cfg


def to_dict(cfg):
    out = dataclasses.asdict(cfg)
    out["synthesis_resolution"] = list(cfg.synthesis_resolution)
    out["inversion_resolution"] = list(cfg.inversion_resolution)
    return out


def to_json(cfg):
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n"


def config_hash(cfg):
    return hashlib.sha256(to_json(cfg).encode()).hexdigest()


def _merge_dataclass(instance, payload, path):
    valid = {f.name: f for f in dataclasses.fields(instance)}
    for key, value in payload.items():
        if key not in valid:
            raise ValueError(f"unknown config key {path + key!r}")
        current = getattr(instance, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            _merge_dataclass(current, value, path + key + ".")
        else:
            setattr(instance, key, value)
    return instance


def from_dict(payload, paper_scale=False):
    """Build a config from a (possibly partial) dict of overrides."""
    payload = dict(payload)
    case = payload.get("case", ISOTROPIC)
    dim = payload.get("dim", 3)
    cfg = default_config(case=case, dim=dim, paper_scale=paper_scale)
    _merge_dataclass(cfg, payload, "")
    return validate_config(cfg)


def load_config(path, paper_scale=False):
    with open(path) as fh:
        payload = json.load(fh)
    if not isinstance(payload, dict):
        raise ValueError("config file must contain a JSON object")
    return from_dict(payload, paper_scale=paper_scale)
