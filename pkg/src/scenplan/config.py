"""Run configuration: schema, defaults, strict loading, and hashing.

Every field defaults to the published operating point of the crossing
experiments (risk 1 - 0.9889, confidence 1e-6, discard 50, keep 150,
support bound 20, horizon 15 at 200 ms, 50 ms control period, prediction
covariance 0.1^2 I).  Configs are plain YAML mappings; unknown keys are
rejected so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Optional

import numpy as np
import yaml

from scenplan.mpcc import CostWeights, PlannerParams, VehicleGeometry
from scenplan.risk import RiskProfile
from scenplan.sampling import TruncationSpec

__all__ = [
    "RiskConfig",
    "UncertaintyConfig",
    "PruneConfig",
    "PlannerConfig",
    "SimConfig",
    "RunConfig",
    "ConfigError",
    "load_config",
    "config_from_dict",
    "config_hash",
]


class ConfigError(ValueError):
    """Malformed configuration (unknown keys, bad values, unreadable file)."""


@dataclass
class RiskConfig:
    eps: float = 1.0 - 0.9889
    beta: float = 1e-6
    s_bar: int = 20
    discard: int = 50
    keep: int = 150
    samples: int = 0  # 0: computed from the bound

    def profile(self) -> RiskProfile:
        return RiskProfile(
            eps=self.eps,
            beta=self.beta,
            s_bar=self.s_bar,
            discard=self.discard,
            keep=self.keep,
            samples=self.samples,
        )


@dataclass
class UncertaintyConfig:
    sigma: float = 0.1
    truncation: str = "none"  # none | radial | width
    rho: float = 0.0
    axis: str = "perp"  # width axis: "perp" (to walking direction) or "x"/"y"
    obstacle_radius: float = 0.0
    batch_seed: int = 20125

    def truncation_spec(self, velocity=None) -> TruncationSpec:
        if self.truncation == "none":
            return TruncationSpec.none()
        if self.truncation == "radial":
            return TruncationSpec.radial(self.rho)
        if self.truncation == "width":
            if self.axis == "perp":
                if velocity is None:
                    raise ConfigError("perp width axis needs a walking direction")
                v = np.asarray(velocity, dtype=float)
                n = np.hypot(v[0], v[1])
                if n < 1e-12:
                    raise ConfigError("cannot orient width axis for a stationary walker")
                return TruncationSpec.width((-v[1] / n, v[0] / n), self.rho)
            if self.axis == "x":
                return TruncationSpec.width((1.0, 0.0), self.rho)
            if self.axis == "y":
                return TruncationSpec.width((0.0, 1.0), self.rho)
            raise ConfigError(f"unknown width axis {self.axis!r}")
        raise ConfigError(f"unknown truncation {self.truncation!r}")


@dataclass
class PruneConfig:
    directions: int = 64
    radii: int = 8
    radius_min: float = 3.0
    radius_max: float = 5.0


@dataclass
class WeightsConfig:
    contour: float = 1.0
    lag: float = 1.0
    progress: float = 0.5
    accel: float = 0.02
    yaw_accel: float = 0.1
    path_speed: float = 0.01
    boundary: float = 5.0
    activation_dist: float = 0.4

    def cost_weights(self) -> CostWeights:
        return CostWeights(
            contour=self.contour,
            lag=self.lag,
            progress=self.progress,
            inputs=(self.accel, self.yaw_accel, self.path_speed),
            boundary=self.boundary,
            activation_dist=self.activation_dist,
        )


@dataclass
class PlannerConfig:
    horizon: int = 15
    dt: float = 0.2
    control_period: float = 0.05
    weights: WeightsConfig = field(default_factory=WeightsConfig)
    accel_limit: float = 3.0
    yaw_accel_limit: float = 3.0
    path_speed_max: float = 1.8
    speed_min: float = 0.0
    speed_max: float = 2.0
    disc_offsets: tuple = (0.0,)
    disc_radius: float = 0.325
    workspace_half_width: float = 20.0
    slack_weight: float = 1000.0
    kkt_tol: float = 1e-6
    qp_tol: float = 1e-8
    max_iterations: int = 12
    solve_budget: float = 0.0  # 0: no wall-clock cutoff (keeps runs deterministic)

    def params(self) -> PlannerParams:
        return PlannerParams(
            horizon=self.horizon,
            dt=self.dt,
            weights=self.weights.cost_weights(),
            input_lo=(-self.accel_limit, -self.yaw_accel_limit, 0.0),
            input_hi=(self.accel_limit, self.yaw_accel_limit, self.path_speed_max),
            speed_bounds=(self.speed_min, self.speed_max),
            workspace_half_width=self.workspace_half_width,
            slack_weight=self.slack_weight,
            kkt_tol=self.kkt_tol,
            qp_tol=self.qp_tol,
            max_iterations=self.max_iterations,
        )

    def geometry(self) -> VehicleGeometry:
        return VehicleGeometry(
            disc_offsets=tuple(self.disc_offsets), disc_radius=self.disc_radius
        )


@dataclass
class SimConfig:
    pedestrians: int = 6
    course_length: float = 12.0
    target_speed: float = 1.8
    timeout: float = 30.0
    risk_samples: int = 100_000
    ped_speed_min: float = 0.8
    ped_speed_max: float = 1.4
    crossing_x_min: float = 3.0
    crossing_x_max: float = 10.0
    spawn_y_min: float = 2.5
    spawn_y_max: float = 4.0
    seeds: int = 100
    seed0: int = 1


@dataclass
class OutputConfig:
    dir: str = "out"


@dataclass
class RunConfig:
    risk: RiskConfig = field(default_factory=RiskConfig)
    uncertainty: UncertaintyConfig = field(default_factory=UncertaintyConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    output: OutputConfig = field(default_factory=OutputConfig)


def _from_dict(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} under {path or 'top level'}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub = f"{path}.{name}" if path else name
        if is_dataclass(f.type) or (isinstance(f.type, str) and f.type.endswith("Config")):
            cls_obj = _CONFIG_TYPES.get(f.type if isinstance(f.type, str) else f.type.__name__)
            kwargs[name] = _from_dict(cls_obj, value, sub)
        elif name == "disc_offsets":
            kwargs[name] = tuple(float(v) for v in value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value under {path or 'top level'}: {exc}") from exc


_CONFIG_TYPES = {
    "RiskConfig": RiskConfig,
    "UncertaintyConfig": UncertaintyConfig,
    "PruneConfig": PruneConfig,
    "WeightsConfig": WeightsConfig,
    "PlannerConfig": PlannerConfig,
    "SimConfig": SimConfig,
    "OutputConfig": OutputConfig,
}


def config_from_dict(data: Optional[dict]) -> RunConfig:
    """Strictly validated RunConfig from a nested mapping."""
    return _from_dict(RunConfig, data or {}, "")


def load_config(path: Optional[str]) -> RunConfig:
    """Load a YAML config file; None yields the full defaults."""
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    return config_from_dict(data)


def config_hash(cfg: RunConfig) -> str:
    """Stable short hash of the full configuration, recorded in outputs."""
    blob = json.dumps(asdict(cfg), sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
