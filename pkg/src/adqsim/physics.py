"""Quasi-static position-based dynamics for the capsule chain.

The pin vertex is fixed and the pull vertex is kinematic (driven to
``pull_target``). Every solver iteration projects the edge (XPBD distance)
and contact constraints together in one linear solve. After the iterations,
free-vertex travel is capped per solver step and a few sequential
non-penetration sweeps run, so a jammed knot builds tension instead of
letting strands pass through each other. The reaction force on the pull grasp
is read from the constraint multipliers as ``lambda * grad C / dt**2`` plus
the grasped vertex's own weight.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import _kernel_params as P
from . import kernels
from .adq import ForceTrace
from .errors import ConfigurationError, ContractViolation, SolverInstabilityError
from .geometry import CapsuleChain


@dataclass(frozen=True)
class PhysicsParams:
    substeps_per_pull: int = 10
    solver_iterations: int = 30
    gravity: tuple = (0.0, 0.0, -9.81)
    linear_density: float = 0.356
    joint_friction: float = 0.5
    joint_damping: float = 0.5
    surface_friction: float = 0.4
    contact_stiffness: float = 1.0
    contact_margin: float = 0.005
    # solver plumbing below; force = lambda / dt**2 uses dt and compliance
    dt: float = 0.01
    compliance: float = 5e-6
    velocity_damping: float = 0.05
    joint_damping_rate: float = 0.2
    joint_friction_speed: float = 0.02
    # contact compliance (m/N) is contact_softness * (1/contact_stiffness - 1)
    contact_softness: float = 2e-4
    neighbor_skip: int = 2
    # widen the per-step contact candidate search so fast motion cannot tunnel
    candidate_pad: float = 0.015
    max_target_step: float = 0.006
    # largest distance a free vertex may travel in one solver step
    max_vertex_step: float = 0.005
    settle_tolerance: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "gravity", tuple(float(g) for g in self.gravity))
        if len(self.gravity) != 3:
            raise ConfigurationError("gravity must have 3 components")
        if int(self.substeps_per_pull) < 2:
            raise ConfigurationError("substeps_per_pull must be >= 2")
        if int(self.solver_iterations) < 1:
            raise ConfigurationError("solver_iterations must be >= 1")
        for name in (
            "linear_density",
            "joint_friction",
            "joint_damping",
            "surface_friction",
            "contact_margin",
            "compliance",
            "velocity_damping",
            "joint_damping_rate",
            "joint_friction_speed",
            "candidate_pad",
            "contact_softness",
        ):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if not 0.0 < self.contact_stiffness <= 1.0:
            raise ConfigurationError("contact_stiffness must lie in (0, 1]")
        if not self.dt > 0 or not self.max_target_step > 0 or not self.max_vertex_step > 0:
            raise ConfigurationError("dt, max_target_step and max_vertex_step must be positive")
        if int(self.neighbor_skip) < 1:
            raise ConfigurationError("neighbor_skip must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["gravity"] = list(self.gravity)
        return d

    @classmethod
    def from_dict(cls, doc):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise ConfigurationError(f"unknown physics fields: {sorted(extra)}")
        return cls(**doc)


@dataclass
class SimState:
    chain: CapsuleChain
    velocities: np.ndarray
    contact_pairs: list = field(default_factory=list)
    pull_target: np.ndarray = None
    force: np.ndarray = None

    def __post_init__(self):
        self.velocities = np.array(self.velocities, dtype=np.float64)
        if self.velocities.shape != self.chain.vertices.shape:
            raise ContractViolation("velocities must match the vertex array shape")
        if not np.all(np.isfinite(self.velocities)):
            raise ContractViolation("velocities must be finite")
        if self.pull_target is None:
            self.pull_target = self.chain.vertices[self.chain.pull_index].copy()
        self.pull_target = np.array(self.pull_target, dtype=np.float64)
        if self.force is None:
            self.force = np.zeros(3)
        self.force = np.array(self.force, dtype=np.float64)

    @classmethod
    def at_rest(cls, chain, params=None):
        params = params or PhysicsParams()
        pairs = detect_contacts(chain, params.contact_margin, params.neighbor_skip)
        return cls(chain, np.zeros_like(chain.vertices), pairs)

    def kinetic_energy(self, params):
        mass = vertex_masses(self.chain, params.linear_density)
        return 0.5 * float(np.sum(mass * np.sum(self.velocities**2, axis=1)))


def vertex_masses(chain, linear_density):
    rest = chain.rest_length
    m = np.zeros(chain.n_vertices)
    m[:-1] += 0.5 * rest * linear_density
    m[1:] += 0.5 * rest * linear_density
    return m


def _solver_inputs(chain, params):
    mass = vertex_masses(chain, params.linear_density)
    with np.errstate(divide="ignore"):
        inv = np.where(mass > 0, 1.0 / mass, 0.0)
    inv[chain.pin_index] = 0.0
    inv[chain.pull_index] = 0.0
    prm = np.zeros(P.SIZE)
    prm[P.DT] = params.dt
    prm[P.ITERATIONS] = params.solver_iterations
    prm[P.GX], prm[P.GY], prm[P.GZ] = params.gravity
    prm[P.COMPLIANCE] = params.compliance
    prm[P.CONTACT_COMPLIANCE] = params.contact_softness * (1.0 / params.contact_stiffness - 1.0)
    prm[P.RADIUS] = chain.radius
    prm[P.CANDIDATE_MARGIN] = params.contact_margin + params.candidate_pad
    prm[P.SURFACE_FRICTION] = params.surface_friction
    prm[P.JOINT_FRICTION] = params.joint_friction
    prm[P.JOINT_DAMPING] = params.joint_damping
    prm[P.VELOCITY_DAMPING] = params.velocity_damping
    prm[P.PULL_MASS] = mass[chain.pull_index]
    prm[P.JOINT_DAMPING_RATE] = params.joint_damping_rate
    prm[P.JOINT_FRICTION_SPEED] = params.joint_friction_speed
    prm[P.NEIGHBOR_SKIP] = params.neighbor_skip
    prm[P.MAX_VERTEX_STEP] = params.max_vertex_step
    return inv, np.ascontiguousarray(chain.rest_length), prm


def detect_contacts(chain, margin, neighbor_skip=2):
    """Non-neighbouring edge pairs (i, j), i < j, closer than 2*radius + margin.

    Pairs with ``j - i <= neighbor_skip`` share a vertex or overlap as
    neighbouring capsules and are never reported.
    """
    pairs = kernels.close_pairs(
        np.ascontiguousarray(chain.vertices), 2.0 * chain.radius + margin, int(neighbor_skip)
    )
    return [(int(i), int(j)) for i, j in pairs]


class _Solver:
    """Mutable stepping context shared by settle and execute_pull."""

    def __init__(self, state, params):
        self.chain = state.chain
        self.params = params
        self.inv, self.rest, self.prm = _solver_inputs(state.chain, params)
        self.x = np.array(state.chain.vertices)
        self.v = np.array(state.velocities)
        self.force = np.array(state.force)
        self.count = 0

    def step(self, target):
        x, v, force, active = kernels.pbd_substep(
            self.x, self.v, self.inv, self.rest, self.chain.pin_index, self.chain.pull_index,
            np.asarray(target, dtype=np.float64), self.prm,
        )
        self.count += 1
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v)) and np.all(np.isfinite(force))):
            raise SolverInstabilityError(self.count)
        return x, v, force, active

    def commit(self, x, v, force):
        self.x, self.v, self.force = x, v, force

    def state(self, target):
        chain = self.chain.with_vertices(self.x)
        pairs = detect_contacts(chain, self.params.contact_margin, self.params.neighbor_skip)
        return SimState(chain, self.v, pairs, np.array(target), self.force)


def settle(state, params, steps):
    """Relax the chain with both grasps held until it stops moving.

    Stops when the largest per-vertex displacement in a substep falls below
    ``params.settle_tolerance`` or after ``steps`` substeps.
    """
    solver = _Solver(state, params)
    target = np.array(state.pull_target)
    for _ in range(int(steps)):
        x, v, force, _active = solver.step(target)
        moved = float(np.max(np.linalg.norm(x - solver.x, axis=1)))
        solver.commit(x, v, force)
        if moved < params.settle_tolerance:
            break
    return solver.state(target)


def _saturate(force, limit):
    mag = float(np.linalg.norm(force))
    if mag > limit:
        # aim a few ulps low so no way of computing the norm rounds above the limit
        return force * (limit / mag * (1.0 - 8.0 * np.finfo(float).eps))
    return force.copy()


def execute_pull(state, params, direction, alpha, force_limit, frame_sink=None):
    """Drive the pull grasp by ``alpha * direction`` over one pull.

    The displacement is spread over ``substeps_per_pull`` substeps (each split
    further so the grasp never moves more than ``max_target_step`` per solver
    step). When the reaction would exceed ``force_limit`` the grasp stops
    advancing for the rest of the pull and the saturated force is recorded.

    Returns
    -------
    (SimState, ForceTrace)
        The trace holds K + 1 samples: the reaction before the pull, then one
        per substep.
    """
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != (3,) or not np.all(np.isfinite(direction)):
        raise ContractViolation("direction must be a finite 3-vector")
    if np.any(np.abs(direction) > 1.0 + 1e-9):
        raise ContractViolation(f"direction components must lie in [-1, 1], got {direction}")
    if not alpha > 0:
        raise ContractViolation("alpha must be positive")
    if not force_limit > 0:
        raise ContractViolation("force_limit must be positive")

    K = int(params.substeps_per_pull)
    solver = _Solver(state, params)
    delta = alpha * direction / K
    micro = max(1, int(math.ceil(float(np.linalg.norm(delta)) / params.max_target_step)))
    micro_delta = delta / micro
    target = np.array(state.pull_target)
    samples = [_saturate(state.force, force_limit)]
    saturated = False
    for k in range(1, K + 1):
        for _ in range(micro):
            if not saturated:
                trial = target + micro_delta
                x, v, force, _active = solver.step(trial)
                if np.linalg.norm(force) > force_limit:
                    saturated = True
                else:
                    solver.commit(x, v, force)
                    target = trial
                    continue
            x, v, force, _active = solver.step(target)
            solver.commit(x, v, force)
        samples.append(_saturate(solver.force, force_limit))
        if frame_sink is not None:
            chain = solver.chain.with_vertices(solver.x)
            frame_sink(
                {
                    "substep": k,
                    "vertices": solver.x.tolist(),
                    "force": samples[-1].tolist(),
                    "contacts": [list(p) for p in detect_contacts(chain, params.contact_margin, params.neighbor_skip)],
                }
            )
    out = solver.state(target)
    out.force = samples[-1].copy()
    return out, ForceTrace(np.array(samples))


def with_params(params, **changes):
    return replace(params, **changes)
