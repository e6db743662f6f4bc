"""Simulation configuration, named presets and canonical JSON hashing."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

from .adq import TAU_INIT, TAU_MAX, TAU_MIN, ObservationMode
from .errors import ConfigurationError
from .geometry import KNOT_KINDS
from .physics import PhysicsParams

SENSOR_MODELS = ("uniform_bias", "gaussian")


@dataclass(frozen=True)
class Randomization:
    """Per-episode sampling intervals, each a (min, max) pair."""

    force_scale: tuple = (0.95, 1.05)
    force_bias: tuple = (-0.6, 0.6)
    pull_multiplier: tuple = (0.05, 10.0)
    linear_density: tuple = (0.267, 0.445)
    joint_friction: tuple = (0.375, 0.625)
    joint_damping: tuple = (0.375, 0.625)
    surface_friction: tuple = (0.3, 0.5)

    def __post_init__(self):
        for f in fields(self):
            rng = tuple(float(v) for v in getattr(self, f.name))
            if len(rng) != 2:
                raise ConfigurationError(f"randomization.{f.name} must be a (min, max) pair")
            if rng[0] > rng[1]:
                raise ConfigurationError(f"randomization.{f.name}: min {rng[0]} exceeds max {rng[1]}")
            object.__setattr__(self, f.name, rng)
        if self.pull_multiplier[0] <= 0:
            raise ConfigurationError("randomization.pull_multiplier must be positive")
        if self.force_scale[0] <= 0:
            raise ConfigurationError("randomization.force_scale must be positive")
        if self.linear_density[0] <= 0:
            raise ConfigurationError("randomization.linear_density must be positive")

    def names(self):
        return [f.name for f in fields(self)]


@dataclass(frozen=True)
class SimConfig:
    physics: PhysicsParams = field(default_factory=PhysicsParams)
    randomization: Randomization = field(default_factory=Randomization)
    preset: str = "nominal"
    alpha: float = 0.03
    force_limit: float = 30.0
    horizon: int = 15
    w_l: float = 1.0
    w_g: float = 0.1
    w_s: float = 10.0
    # success threshold on the free-end length; None means one edge rest length
    epsilon: float = None
    knot_kind: str = "loose_overhand"
    n_vertices: int = 48
    knot_scale: float = 0.94
    pin_candidates: tuple = (0, 1, 2)
    # interior grasps, so the free end beyond the pull grasp can thread out
    pull_candidates: tuple = (24, 26, 28)
    role_swap: bool = True
    yaw: bool = True
    obs_mode: str = "adq"
    fixed_tau: float = 0.5
    tau_min: float = TAU_MIN
    tau_max: float = TAU_MAX
    tau_init: float = TAU_INIT
    delta_max: float = 0.1
    # uniform_bias draws one bias per episode; gaussian adds fresh noise to every sample
    sensor_model: str = "uniform_bias"
    sensor_noise: float = 0.3
    sensor_randomization: bool = True
    z_noise_deg: float = 5.0
    settle_steps: int = 400
    # number of distinct knot seeds; 0 draws a fresh seed for every episode
    knot_pool: int = 16
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.physics, dict):
            object.__setattr__(self, "physics", PhysicsParams.from_dict(self.physics))
        if isinstance(self.randomization, dict):
            object.__setattr__(self, "randomization", Randomization(**self.randomization))
        object.__setattr__(self, "pin_candidates", tuple(int(i) for i in self.pin_candidates))
        object.__setattr__(self, "pull_candidates", tuple(int(i) for i in self.pull_candidates))
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be positive")
        if not self.force_limit > 0:
            raise ConfigurationError("force_limit must be positive")
        if int(self.horizon) < 1:
            raise ConfigurationError("horizon must be >= 1")
        for name in ("w_l", "w_g", "w_s"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")
        if self.epsilon is not None and not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")
        if self.knot_kind not in KNOT_KINDS:
            raise ConfigurationError(f"knot_kind must be one of {KNOT_KINDS}")
        if not self.knot_scale > 0:
            raise ConfigurationError("knot_scale must be positive")
        if not self.pin_candidates or not self.pull_candidates:
            raise ConfigurationError("grasp candidate lists must be non-empty")
        n = int(self.n_vertices)
        for idx in self.pin_candidates + self.pull_candidates:
            if not -n <= idx < n:
                raise ConfigurationError(f"grasp candidate {idx} out of range for {n} vertices")
        if {i % n for i in self.pin_candidates} & {i % n for i in self.pull_candidates}:
            raise ConfigurationError("pin and pull candidates must not share a vertex")
        try:
            ObservationMode(self.obs_mode)
        except ValueError:
            raise ConfigurationError(
                f"obs_mode must be one of {[m.value for m in ObservationMode]}"
            ) from None
        if not 0 < self.tau_min <= self.tau_max:
            raise ConfigurationError("need 0 < tau_min <= tau_max")
        for name in ("fixed_tau", "tau_init"):
            if not self.tau_min <= getattr(self, name) <= self.tau_max:
                raise ConfigurationError(f"{name} must lie in [tau_min, tau_max]")
        if not self.delta_max > 0:
            raise ConfigurationError("delta_max must be positive")
        if self.sensor_model not in SENSOR_MODELS:
            raise ConfigurationError(f"sensor_model must be one of {SENSOR_MODELS}")
        if self.sensor_noise < 0 or self.z_noise_deg < 0:
            raise ConfigurationError("sensor_noise and z_noise_deg must be >= 0")
        if int(self.settle_steps) < 1:
            raise ConfigurationError("settle_steps must be >= 1")
        if int(self.knot_pool) < 0:
            raise ConfigurationError("knot_pool must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["physics"] = self.physics.to_dict()
        d["randomization"] = {k: list(v) for k, v in asdict(self.randomization).items()}
        d["pin_candidates"] = list(self.pin_candidates)
        d["pull_candidates"] = list(self.pull_candidates)
        return d

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigurationError("config document must be a JSON object")
        known = {f.name for f in fields(cls)}
        extra = set(doc) - known
        if extra:
            raise ConfigurationError(f"unknown config fields: {sorted(extra)}")
        doc = dict(doc)
        if "randomization" in doc:
            rand = doc["randomization"]
            extra = set(rand) - {f.name for f in fields(Randomization)}
            if extra:
                raise ConfigurationError(f"unknown randomization fields: {sorted(extra)}")
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(doc)

    def config_hash(self):
        return config_hash(self.to_dict())

    def with_mode(self, mode):
        return replace(self, obs_mode=ObservationMode(mode).value)


def canonical_json(doc):
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(doc):
    return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()


def _offset(rng, d):
    return (rng[0] + d, rng[1] + d)


def preset(name, **changes):
    """Named configuration; ``shifted`` stands in for a second simulator."""
    base = SimConfig()
    if name == "nominal":
        cfg = base
    elif name == "shifted":
        phys = replace(
            base.physics,
            contact_stiffness=base.physics.contact_stiffness * 0.5,
            solver_iterations=base.physics.solver_iterations * 2,
        )
        rnd = replace(
            base.randomization,
            joint_friction=_offset(base.randomization.joint_friction, 0.1),
            surface_friction=_offset(base.randomization.surface_friction, 0.1),
        )
        cfg = replace(base, physics=phys, randomization=rnd, preset="shifted", sensor_model="gaussian")
    else:
        raise ConfigurationError(f"unknown preset {name!r}; expected 'nominal' or 'shifted'")
    return replace(cfg, **changes) if changes else cfg
