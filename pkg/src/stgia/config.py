"""Experiment configuration: JSON schema, loading, and builders.

A config file is a JSON object with the sections below; unknown keys fail
loudly with their path so typos cannot silently change an experiment.

    {
      "seed": 7,
      "out_dir": "results/run",
      "network": {"kind": "grid", "rows": 10, "cols": 10, "spacing_m": 1000.0},
      "data": {"kind": "synthetic", "n_users": 10, "length": 30,
               "step_budget_m": 500.0, "domain_radius_m": 2500.0},
      "model": {"window_len": 3, "hidden_units": 8, "num_cells": 16,
                "coordinate_scale": null},
      "training": {"rounds": 10, "eta_local": 1.0},
      "attack": {"max_iters": 200, "attack_rate": 1.0, ...},
      "defense": {"mechanism": "none", ...}
    }

A null coordinate_scale resolves to the network's bounding-box diagonal.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

from .attack import AttackConfig
from .dataio import (
    load_checkins,
    read_trajectories,
    resample_trajectory,
    synthesize_trajectories,
    constrained_domain_for,
)
from .defense import DefensePlan, ImportanceParams, RiskProfile, RiskSource
from .errors import ConfigurationError
from .fedsim import ClientState
from .geo import ProjectionSpec, RoadNetwork, generate_grid_network, read_network
from .model import ModelSpec


@dataclass
class NetworkConfig:
    kind: str = "grid"  # grid | file
    rows: int = 10
    cols: int = 10
    spacing_m: float = 1000.0
    path: str | None = None

    def validate(self):
        if self.kind not in ("grid", "file"):
            raise ConfigurationError(f"network.kind must be 'grid' or 'file', got {self.kind!r}")
        if self.kind == "file" and not self.path:
            raise ConfigurationError("network.path is required when network.kind is 'file'")


@dataclass
class DataConfig:
    kind: str = "synthetic"  # synthetic | csv | trajectories
    n_users: int = 10
    length: int = 30
    step_budget_m: float = 500.0
    domain_radius_m: float = 2500.0
    path: str | None = None
    origin_lat: float = 0.0
    origin_lon: float = 0.0
    interval_s: float = 600.0
    min_segment_len: int = 8

    def validate(self):
        if self.kind not in ("synthetic", "csv", "trajectories"):
            raise ConfigurationError(
                f"data.kind must be 'synthetic', 'csv' or 'trajectories', got {self.kind!r}"
            )
        if self.kind in ("csv", "trajectories") and not self.path:
            raise ConfigurationError(f"data.path is required when data.kind is {self.kind!r}")


@dataclass
class ModelConfig:
    window_len: int = 3
    hidden_units: int = 8
    num_cells: int = 16
    coordinate_scale: float | None = None  # null: bounding-box diagonal


@dataclass
class TrainingConfig:
    rounds: int = 10
    eta_local: float = 1.0
    holdout_frac: float = 0.2

    def validate(self):
        if self.rounds < 1:
            raise ConfigurationError("training.rounds must be >= 1")
        if not 0 < self.holdout_frac < 1:
            raise ConfigurationError("training.holdout_frac must be in (0, 1)")


@dataclass
class DefenseConfig:
    mechanism: str = "none"
    clip_norm: float = 1.0
    noise_multiplier: float = 1.0
    eps_per_meter: float = 0.01
    total_epsilon: float = 10.0
    asr_weight: float = 0.5
    ait_weight: float = 0.5
    ait_reference: int = 200
    gamma_cap: float = 10.0
    risk_mode: str = "shadow"  # shadow | profile
    risk_profile_csv: str | None = None
    clamp_allocation: bool = False
    p_min: float = 0.01
    p_max: float = 0.5

    def to_plan(self) -> DefensePlan:
        profile = None
        if self.risk_mode == "profile":
            if not self.risk_profile_csv:
                raise ConfigurationError(
                    "defense.risk_profile_csv is required when defense.risk_mode is 'profile'"
                )
            profile = read_risk_profile_csv(self.risk_profile_csv)
        return DefensePlan(
            mechanism=self.mechanism,
            clip_norm=self.clip_norm,
            noise_multiplier=self.noise_multiplier,
            eps_per_meter=self.eps_per_meter,
            total_epsilon=self.total_epsilon,
            importance=ImportanceParams(
                self.asr_weight, self.ait_weight, self.ait_reference, self.gamma_cap
            ),
            risk=RiskSource(mode=self.risk_mode, profile=profile),
            clamp_allocation=self.clamp_allocation,
            p_min=self.p_min,
            p_max=self.p_max,
        )


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "results"
    network: NetworkConfig = field(default_factory=NetworkConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)


_SECTION_TYPES = {
    "network": NetworkConfig,
    "data": DataConfig,
    "model": ModelConfig,
    "training": TrainingConfig,
    "defense": DefenseConfig,
}


def _build_section(cls, doc: dict, path: str):
    import dataclasses

    if not isinstance(doc, dict):
        raise ConfigurationError(f"config section {path!r} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - names
    if unknown:
        raise ConfigurationError(f"unknown config key {path}.{sorted(unknown)[0]}")
    try:
        return cls(**doc)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad config section {path!r}: {exc}") from exc


def config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigurationError("config root must be a JSON object")
    known = {"seed", "out_dir", "attack"} | set(_SECTION_TYPES)
    unknown = set(doc) - known
    if unknown:
        raise ConfigurationError(f"unknown config key {sorted(unknown)[0]}")
    cfg = ExperimentConfig()
    if "seed" in doc:
        try:
            cfg.seed = int(doc["seed"])
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"config key 'seed' must be an integer: {exc}") from exc
    if "out_dir" in doc:
        cfg.out_dir = str(doc["out_dir"])
    for name, cls in _SECTION_TYPES.items():
        if name in doc:
            setattr(cfg, name, _build_section(cls, doc[name], name))
    if "attack" in doc:
        adoc = dict(doc["attack"])
        if adoc.get("seed") is None:
            adoc["seed"] = cfg.seed
        if "convergence_tol_m" in adoc and adoc["convergence_tol_m"] is None:
            del adoc["convergence_tol_m"]
        cfg.attack = _build_section(AttackConfig, adoc, "attack")
    else:
        cfg.attack = AttackConfig(seed=cfg.seed)
    cfg.network.validate()
    cfg.data.validate()
    cfg.training.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from exc
    return config_from_dict(doc)


def build_network(cfg: ExperimentConfig) -> RoadNetwork:
    if cfg.network.kind == "grid":
        return generate_grid_network(cfg.network.rows, cfg.network.cols, cfg.network.spacing_m)
    return read_network(cfg.network.path)


def resolve_model_spec(cfg: ExperimentConfig, net: RoadNetwork) -> ModelSpec:
    scale = cfg.model.coordinate_scale
    if scale is None:
        scale = net.diagonal()
    return ModelSpec(cfg.model.window_len, cfg.model.hidden_units, cfg.model.num_cells, scale)


def build_clients(cfg: ExperimentConfig, net: RoadNetwork) -> list[ClientState]:
    """Materialize clients from the data section, with constrained domains."""
    d = cfg.data
    if d.kind == "synthetic":
        trajectories = synthesize_trajectories(
            net, d.n_users, d.length, cfg.seed, d.step_budget_m, d.interval_s
        )
    elif d.kind == "trajectories":
        trajectories = read_trajectories(d.path)
    else:
        proj = ProjectionSpec(d.origin_lat, d.origin_lon)
        checkins = load_checkins(d.path, proj)
        by_user: dict[str, list] = {}
        for c in checkins:
            by_user.setdefault(c.user_id, []).append(c)
        trajectories = []
        for user in sorted(by_user):
            segments = resample_trajectory(
                by_user[user], net, proj, d.interval_s, d.min_segment_len
            )
            if segments:
                # longest surviving segment represents the user
                trajectories.append(max(segments, key=len))
    if not trajectories:
        raise ConfigurationError("no usable trajectories from the data source")
    clients = []
    for i, tr in enumerate(sorted(trajectories, key=lambda t: t.user_id)):
        domain = constrained_domain_for(tr, net, d.domain_radius_m)
        clients.append(ClientState(i, tr, cfg.training.eta_local, domain))
    return clients


def read_risk_profile_csv(path) -> RiskProfile:
    """Load a risk profile from an attack summary CSV (round, asr, mean_ait)."""
    prof = RiskProfile()
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                ait = row.get("mean_ait", "")
                prof.set_round(
                    int(row["round"]),
                    float(row["asr"]),
                    float(ait) if ait not in ("", None) else None,
                )
    except FileNotFoundError as exc:
        raise ConfigurationError(f"risk profile file not found: {path}") from exc
    except (KeyError, ValueError) as exc:
        raise ConfigurationError(f"bad risk profile CSV {path}: {exc}") from exc
    if not prof.asr:
        raise ConfigurationError(f"risk profile CSV {path} has no rows")
    return prof


def dpsgd_sigma_for_epsilon(eps: float, delta: float = 1e-5) -> float:
    """Gaussian-mechanism noise multiplier for a per-round epsilon."""
    if not eps > 0:
        raise ConfigurationError("epsilon must be positive")
    return math.sqrt(2.0 * math.log(1.25 / delta)) / eps
