"""Run configuration: scale profiles, JSON loading, strict validation.

A RunConfig aggregates everything one pipeline invocation needs: lattice
dims, plane counts, datapoint budget, network and training settings, cohort
layout, and output paths. Two built-in profiles exist: ``desk`` (small
enough to train on one CPU in minutes to tens of minutes) and ``paper``
(the full-scale layout; declarable and validated, but not sized for a
desktop run). JSON files select a profile and override individual fields;
unknown keys are rejected so typos fail loudly instead of silently keeping
a default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .network import NetworkConfig
from .training import TrainConfig, default_msl_fractions


@dataclass
class SimConfig:
    """Cohort synthesis settings."""

    n_u: int = 16
    n_v: int = 16
    n_w: int = 5
    t_frames: int = 8
    n_sax: int = 4
    n_lax: int = 2
    n_subjects: int = 8
    n_train: int = 6
    noise_mm: float = 0.3
    n_cloud: int = 220
    use_true_params: bool = True     # skip the two-layer fit in the pipeline
    fit_iters: int = 400
    fit_lr: float = 0.05
    twist_apex: float = 0.21
    twist_base: float = -0.09

    def validate(self):
        if self.n_u < 2 or self.n_v < 3 or self.n_w < 2:
            raise ConfigError(
                f"lattice ({self.n_u}, {self.n_v}, {self.n_w}) too small: "
                "need n_u >= 2, n_v >= 3, n_w >= 2")
        if self.t_frames < 1:
            raise ConfigError("t_frames must be positive")
        if self.n_sax < 1 or self.n_lax < 1:
            raise ConfigError("need at least one plane per view")
        if not 0 < self.n_train < self.n_subjects:
            raise ConfigError(
                f"n_train={self.n_train} must split n_subjects="
                f"{self.n_subjects} into non-empty train and eval sets")


@dataclass
class AblateConfig:
    """Ablation matrix and its (reduced) per-cell training budget."""

    ks: tuple = (8, 16, 24)
    modes: tuple = ("full", "global_only", "local_only")
    cue_modes: tuple = ("mixed", "separated")
    stage2: tuple = (True,)
    e1: int = 40
    e2: int = 5

    def validate(self):
        if not self.ks or not self.modes or not self.cue_modes \
                or not self.stage2:
            raise ConfigError("ablation matrix axes must be non-empty")
        if self.e1 < 0 or self.e2 < 0:
            raise ConfigError("ablation epoch counts must be non-negative")


@dataclass
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    n_s: int = 256
    out_dir: str = "out"
    emit_timing: bool = False        # keep outputs byte-reproducible
    sim: SimConfig = field(default_factory=SimConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def validate(self):
        if self.profile not in ("desk", "paper"):
            raise ConfigError(f"unknown profile '{self.profile}'")
        if self.n_s < 1:
            raise ConfigError("n_s must be positive")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        self.sim.validate()
        self.network.validate()
        self.train.validate()
        self.ablate.validate()
        return self


def desk_config() -> RunConfig:
    return RunConfig()


def paper_config() -> RunConfig:
    """Full-scale layout. Validated but not sized for a desktop run."""
    return RunConfig(
        profile="paper",
        n_s=3200,
        sim=SimConfig(n_u=50, n_v=50, n_w=9, t_frames=20, n_sax=10, n_lax=3,
                      n_subjects=220, n_train=200),
        network=NetworkConfig(),
        train=TrainConfig(e1=200, e2=50))


_PROFILES = {"desk": desk_config, "paper": paper_config}


def _apply_overrides(obj, overrides: dict, path: str):
    """Set dataclass fields from a dict, recursing into nested dataclasses;
    unknown keys and wrong shapes raise ConfigError naming the full path."""
    known = {f.name: f for f in fields(obj)}
    for key, val in overrides.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"unknown config key: {where}")
        cur = getattr(obj, key)
        if hasattr(cur, "__dataclass_fields__"):
            if not isinstance(val, dict):
                raise ConfigError(f"{where} must be an object")
            _apply_overrides(cur, val, where)
        elif isinstance(cur, tuple):
            if not isinstance(val, list):
                raise ConfigError(f"{where} must be a list")
            setattr(obj, key, tuple(val))
        elif isinstance(cur, dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where} must be an object")
            setattr(obj, key, dict(val))
        else:
            setattr(obj, key, type(cur)(val) if cur is not None else val)
    return obj


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data)
    profile = data.pop("profile", "desk")
    if profile not in _PROFILES:
        raise ConfigError(f"unknown profile '{profile}'")
    cfg = _PROFILES[profile]()
    cfg.profile = profile
    _apply_overrides(cfg, data, "")
    return cfg.validate()


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") \
            from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return config_from_dict(data)


def config_to_dict(cfg: RunConfig) -> dict:
    sim = cfg.sim
    net = cfg.network
    tr = cfg.train
    return {
        "profile": cfg.profile, "seed": cfg.seed, "n_s": cfg.n_s,
        "out_dir": cfg.out_dir, "emit_timing": cfg.emit_timing,
        "sim": {f.name: getattr(sim, f.name) for f in fields(sim)},
        "network": {
            "c_h": net.c_h, "c_z": net.c_z, "widths": list(net.widths),
            "down_ratio": net.down_ratio, "k_cross": net.k_cross,
            "k_self": net.k_self, "n_up_neighbors": net.n_up_neighbors,
            "head_hidden": net.head_hidden,
            "vel_hidden": list(net.vel_hidden),
            "flow_steps": net.flow_steps, "mode": net.mode,
            "cue_mode": net.cue_mode,
            "value_displacement": net.value_displacement,
            "value_gain": net.value_gain},
        "train": {"e1": tr.e1, "e2": tr.e2, "lr": tr.lr,
                  "lambda_d": tr.lambda_d, "lambda_s": tr.lambda_s,
                  "window": tr.window,
                  "msl_fractions": dict(tr.msl_fractions)},
        "ablate": {"ks": list(cfg.ablate.ks),
                   "modes": list(cfg.ablate.modes),
                   "cue_modes": list(cfg.ablate.cue_modes),
                   "stage2": list(cfg.ablate.stage2),
                   "e1": cfg.ablate.e1, "e2": cfg.ablate.e2},
    }


def default_msl() -> dict:
    return default_msl_fractions()
