"""Episode loop: knot initialization, randomization, pulls, reward and records.

``reset`` and ``step`` are functional: ``step`` never mutates its input state,
so a state can be replayed from any point. ``Env`` wraps them for callers that
prefer the usual object interface.
"""
from __future__ import annotations

import copy
import functools
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .adq import (
    ForceTrace,
    ObservationMode,
    ObservationStack,
    ThresholdState,
    build_observation,
    force_difference,
    update_threshold,
)
from .config import SimConfig
from .errors import ContractViolation, EpisodeInitError, SolverInstabilityError
from .geometry import free_end_length, make_knot, rotate_z, writhe
from .physics import SimState, execute_pull, settle

SCHEMA = 1

# named RNG substreams, combined with the root seed and the episode seed
STREAM_RANDOMIZATION = 0
STREAM_SENSOR = 1
STREAM_OBS_NOISE = 2
STREAM_POLICY = 3
STREAM_BOOTSTRAP = 4


def substream(root_seed, episode_seed, stream, attempt=0):
    """Independent generator for one (root, episode, stream) triple."""
    ss = np.random.SeedSequence(entropy=int(root_seed), spawn_key=(int(episode_seed), int(attempt), int(stream)))
    return np.random.default_rng(ss)


@dataclass(frozen=True)
class StepAction:
    """Pull direction ``u`` and raw threshold increment ``delta_tau``, both in [-1, 1]^3."""

    u: np.ndarray
    delta_tau: np.ndarray

    def __post_init__(self):
        u = np.array(self.u, dtype=np.float64).reshape(-1)
        d = np.array(self.delta_tau, dtype=np.float64).reshape(-1)
        if u.shape != (3,) or d.shape != (3,):
            raise ContractViolation("u and delta_tau must each have 3 components")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(d))):
            raise ContractViolation("action must be finite")
        if np.any(np.abs(u) > 1.0) or np.any(np.abs(d) > 1.0):
            raise ContractViolation("action components must lie in [-1, 1]")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "delta_tau", d)

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=np.float64).reshape(-1)
        if a.shape != (6,):
            raise ContractViolation(f"action vector must have 6 entries, got {a.shape}")
        return cls(a[:3], a[3:])

    def as_array(self):
        return np.concatenate((self.u, self.delta_tau))


@dataclass(frozen=True)
class EpisodeParams:
    """Everything drawn at reset; enough to rebuild the initial state."""

    episode_seed: int
    attempt: int
    knot_seed: int
    yaw: float
    swapped: bool
    pin_index: int
    pull_index: int
    force_scale: float
    force_bias: tuple
    pull_multiplier: float
    linear_density: float
    joint_friction: float
    joint_damping: float
    surface_friction: float

    def to_dict(self):
        d = dict(self.__dict__)
        d["force_bias"] = list(self.force_bias)
        return d


@dataclass(frozen=True)
class EnvState:
    config: SimConfig
    episode: EpisodeParams
    physics: object
    sim: SimState
    thresholds: ThresholdState
    stack: ObservationStack
    sensor_rng: np.random.Generator
    noise_rng: np.random.Generator
    t: int
    ell: float
    writhe_initial: float
    writhe: float
    epsilon: float
    done: bool = False
    success: bool = False

    @property
    def mode(self):
        return ObservationMode(self.config.obs_mode)

    def grasp_positions(self):
        v = self.sim.chain.vertices
        return v[self.sim.chain.pin_index].copy(), v[self.sim.chain.pull_index].copy()


def _initial_thresholds(config):
    mode = ObservationMode(config.obs_mode)
    tau0 = config.tau_init if mode.adaptive else config.fixed_tau
    return ThresholdState.initial(tau0, config.tau_min, config.tau_max, config.delta_max)


def sample_episode(config, episode_seed, attempt=0):
    """Draw the per-episode randomization from its own substream."""
    rng = substream(config.seed, episode_seed, STREAM_RANDOMIZATION, attempt)
    r = config.randomization
    n = int(config.n_vertices)

    def uni(bounds):
        return float(rng.uniform(bounds[0], bounds[1]))

    pool = int(config.knot_pool)
    knot_seed = int(rng.integers(0, pool)) if pool else int(rng.integers(0, 2**31 - 1))
    yaw = float(rng.uniform(0.0, 2.0 * math.pi)) if config.yaw else 0.0
    pin = int(config.pin_candidates[int(rng.integers(len(config.pin_candidates)))]) % n
    pull = int(config.pull_candidates[int(rng.integers(len(config.pull_candidates)))]) % n
    swapped = bool(rng.random() < 0.5) if config.role_swap else False
    if swapped:
        pin, pull = pull, pin
    scale = uni(r.force_scale)
    bias = tuple(float(b) for b in rng.uniform(r.force_bias[0], r.force_bias[1], size=3))
    return EpisodeParams(
        episode_seed=int(episode_seed),
        attempt=int(attempt),
        knot_seed=knot_seed,
        yaw=yaw,
        swapped=swapped,
        pin_index=pin,
        pull_index=pull,
        force_scale=scale,
        force_bias=bias,
        pull_multiplier=uni(r.pull_multiplier),
        linear_density=uni(r.linear_density),
        joint_friction=uni(r.joint_friction),
        joint_damping=uni(r.joint_damping),
        surface_friction=uni(r.surface_friction),
    )


def sensor_reading(config, episode, physics_trace, rng):
    """Apply the force-sensor model to a physics trace (returns a new array)."""
    f = np.asarray(physics_trace, dtype=np.float64)
    if not config.sensor_randomization:
        return f.copy()
    out = episode.force_scale * f
    if config.sensor_model == "uniform_bias":
        out = out + np.asarray(episode.force_bias)
    else:
        out = out + rng.normal(0.0, config.sensor_noise, size=f.shape)
    return out


def perturb_direction(z, rng, max_deg):
    """Rotate unit vector ``z`` by a uniform angle in [-max_deg, max_deg] about a random axis."""
    if max_deg == 0:
        return np.array(z, dtype=np.float64)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = math.radians(float(rng.uniform(-max_deg, max_deg)))
    c, s = math.cos(ang), math.sin(ang)
    return z * c + np.cross(axis, z) * s + axis * float(axis @ z) * (1.0 - c)


def _observe(state_like, trace, thresholds, noise_rng):
    config = state_like["config"]
    chain = state_like["chain"]
    pin = chain.vertices[chain.pin_index]
    pull = chain.vertices[chain.pull_index]
    obs = build_observation(trace, thresholds, pin, pull, config.obs_mode)
    z = perturb_direction(obs.z, noise_rng, config.z_noise_deg)
    return replace(obs, z=z)


@functools.lru_cache(maxsize=1024)
def _settled_template(kind, n, scale, knot_seed, pin, pull, physics, steps):
    """Settled knot before yaw; treat the returned state as read-only."""
    chain = make_knot(kind, n, scale, knot_seed).with_grasps(pin, pull)
    return settle(SimState.at_rest(chain, physics), physics, steps)


def _rotate_state(sim, angle):
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return SimState(
        rotate_z(sim.chain, angle),
        sim.velocities @ rot.T,
        list(sim.contact_pairs),
        sim.pull_target @ rot.T,
        sim.force @ rot.T,
    )


def _build_initial(config, episode):
    # settling uses the preset's mid-range material and is cached; yaw about
    # the gravity axis is applied afterwards since it commutes with settling
    template = _settled_template(
        config.knot_kind,
        int(config.n_vertices),
        float(config.knot_scale),
        episode.knot_seed,
        episode.pin_index,
        episode.pull_index,
        config.physics,
        int(config.settle_steps),
    )
    sim = _rotate_state(template, episode.yaw)
    physics = replace(
        config.physics,
        linear_density=episode.linear_density,
        joint_friction=episode.joint_friction,
        joint_damping=episode.joint_damping,
        surface_friction=episode.surface_friction,
    )
    return physics, sim


def reset(config, episode_seed):
    """Start an episode; returns ``(EnvState, flat observation of length 45)``.

    A settle that diverges is retried once with a derived seed before
    ``EpisodeInitError`` is raised.
    """
    last_error = None
    for attempt in range(2):
        episode = sample_episode(config, episode_seed, attempt)
        try:
            physics, sim = _build_initial(config, episode)
            break
        except SolverInstabilityError as exc:
            last_error = exc
    else:
        raise EpisodeInitError(f"settle diverged for episode seed {episode_seed}: {last_error}")

    sensor_rng = substream(config.seed, episode_seed, STREAM_SENSOR, episode.attempt)
    noise_rng = substream(config.seed, episode_seed, STREAM_OBS_NOISE, episode.attempt)
    thresholds = _initial_thresholds(config)
    f0 = np.array(sim.force)
    reading = sensor_reading(config, episode, np.stack((f0, f0)), sensor_rng)
    stack = ObservationStack()
    obs = _observe({"config": config, "chain": sim.chain}, ForceTrace(reading), thresholds, noise_rng)
    flat = stack.push(obs)
    eps = config.epsilon if config.epsilon is not None else float(sim.chain.rest_length.mean())
    wr = writhe(sim.chain)
    state = EnvState(
        config=config,
        episode=episode,
        physics=physics,
        sim=sim,
        thresholds=thresholds,
        stack=stack,
        sensor_rng=sensor_rng,
        noise_rng=noise_rng,
        t=0,
        ell=episode_ell(sim.chain, sim.contact_pairs),
        writhe_initial=wr,
        writhe=wr,
        epsilon=eps,
    )
    return state, flat


def entangling_pairs(chain, contact_pairs):
    """Contacts between the free end (beyond the pull grasp) and the held part.

    Contacts of the free end with itself do not tie it to anything and are
    left out of the free-end length.
    """
    # edge e joins vertices e and e+1, so edges below the grasp index lie on
    # one side of it and the rest on the other, whichever tip is free
    pull = chain.pull_index
    return [(i, j) for i, j in contact_pairs if min(i, j) < pull <= max(i, j)]


def episode_ell(chain, contact_pairs):
    return free_end_length(chain, entangling_pairs(chain, contact_pairs))


def reward_terms(config, delta_ell, g, success):
    """Reward and its three weighted components."""
    terms = {
        "length": config.w_l * delta_ell,
        "writhe": -config.w_g * g,
        "success": config.w_s * (1.0 if success else 0.0),
    }
    return terms["length"] + terms["writhe"] + terms["success"], terms


def step(envstate, action, frame_sink=None):
    """Execute one pull; returns ``(EnvState, obs, reward, done, info)``.

    The input state is left untouched.
    """
    if envstate.done:
        raise ContractViolation("step called on a finished episode")
    if not isinstance(action, StepAction):
        action = StepAction.from_array(action)
    config = envstate.config
    sensor_rng = copy.deepcopy(envstate.sensor_rng)
    noise_rng = copy.deepcopy(envstate.noise_rng)
    stack = copy.deepcopy(envstate.stack)

    alpha = config.alpha * envstate.episode.pull_multiplier
    sim, trace = execute_pull(
        envstate.sim, envstate.physics, action.u, alpha, config.force_limit, frame_sink=frame_sink
    )
    reading = sensor_reading(config, envstate.episode, trace.samples, sensor_rng)
    thresholds = envstate.thresholds
    if ObservationMode(config.obs_mode).adaptive:
        thresholds = update_threshold(thresholds, action.delta_tau)
    obs = _observe({"config": config, "chain": sim.chain}, ForceTrace(reading), thresholds, noise_rng)
    flat = stack.push(obs)

    t = envstate.t + 1
    ell = episode_ell(sim.chain, sim.contact_pairs)
    g = writhe(sim.chain)
    success = ell <= envstate.epsilon
    done = bool(success or t >= config.horizon)
    delta_ell = ell - envstate.ell
    reward, terms = reward_terms(config, delta_ell, g, success)
    info = {
        "t": t,
        "force_trace": trace.samples,
        "sensor_trace": reading,
        "delta_f": force_difference(reading),
        "q": obs.q,
        "tau": thresholds.tau,
        "writhe": g,
        "ell": ell,
        "delta_ell": delta_ell,
        "reward_terms": terms,
        "success": bool(success),
        "pin": sim.chain.vertices[sim.chain.pin_index].copy(),
        "pull": sim.chain.vertices[sim.chain.pull_index].copy(),
    }
    new_state = replace(
        envstate,
        sim=sim,
        thresholds=thresholds,
        stack=stack,
        sensor_rng=sensor_rng,
        noise_rng=noise_rng,
        t=t,
        ell=ell,
        writhe=g,
        done=done,
        success=bool(success),
    )
    return new_state, flat, float(reward), done, info


@dataclass
class StepRecord:
    t: int
    action: list
    force_trace: list
    sensor_trace: list
    delta_f: list
    q: list
    tau: list
    writhe: float
    ell: float
    delta_ell: float
    reward: float
    reward_terms: dict
    observation: list

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class EpisodeRecord:
    seed: int
    config_hash: str
    obs_mode: str
    episode: dict
    writhe_initial: float
    ell_initial: float
    steps: list = field(default_factory=list)
    frames: list = field(default_factory=list)
    success: bool = False

    @property
    def n_steps(self):
        return len(self.steps)

    @property
    def writhe_final(self):
        return self.steps[-1].writhe if self.steps else self.writhe_initial

    @property
    def writhe_reduction(self):
        return self.writhe_final - self.writhe_initial

    @property
    def peak_force(self):
        if not self.steps:
            return 0.0
        return max(float(np.max(np.linalg.norm(np.asarray(s.force_trace), axis=1))) for s in self.steps)

    @property
    def total_reward(self):
        return float(sum(s.reward for s in self.steps))

    def summary(self):
        return {
            "seed": self.seed,
            "config_hash": self.config_hash,
            "obs_mode": self.obs_mode,
            "episode": self.episode,
            "steps": self.n_steps,
            "success": self.success,
            "writhe_initial": self.writhe_initial,
            "writhe_final": self.writhe_final,
            "writhe_reduction": self.writhe_reduction,
            "ell_initial": self.ell_initial,
            "peak_force": self.peak_force,
            "total_reward": self.total_reward,
        }

    def to_jsonl(self):
        """One line per step, then per-substep frames if any, then the summary."""
        lines = []
        for s in self.steps:
            lines.append(json.dumps({"schema": SCHEMA, "type": "step", **s.to_dict()}, sort_keys=True))
        for fr in self.frames:
            lines.append(json.dumps({"schema": SCHEMA, "type": "frame", **fr}, sort_keys=True))
        lines.append(json.dumps({"schema": SCHEMA, "type": "summary", **self.summary()}, sort_keys=True))
        return "\n".join(lines) + "\n"


class Env:
    """Stateful convenience wrapper around ``reset`` and ``step``."""

    def __init__(self, config):
        self.config = config
        self.state = None

    def reset(self, episode_seed):
        self.state, obs = reset(self.config, episode_seed)
        return obs

    def step(self, action, frame_sink=None):
        if self.state is None:
            raise ContractViolation("reset must be called before step")
        self.state, obs, reward, done, info = step(self.state, action, frame_sink)
        return obs, reward, done, info


def run_episode(policy, config, seed, record_frames=False):
    """Roll ``policy`` out for one episode and return its ``EpisodeRecord``.

    ``policy`` follows the handle protocol: ``reset(rng)`` at episode start and
    ``policy(flat_obs, info) -> 6-vector`` per step, where ``info`` carries the
    current pin and pull positions.
    """
    state, obs = reset(config, seed)
    policy.reset(substream(config.seed, seed, STREAM_POLICY, state.episode.attempt))
    rec = EpisodeRecord(
        seed=int(seed),
        config_hash=config.config_hash(),
        obs_mode=config.obs_mode,
        episode=state.episode.to_dict(),
        writhe_initial=state.writhe_initial,
        ell_initial=state.ell,
    )
    while not state.done:
        pin, pull = state.grasp_positions()
        a = np.asarray(policy(obs, {"pin": pin, "pull": pull, "t": state.t}), dtype=np.float64)
        action = StepAction.from_array(a)
        sink = None
        if record_frames:
            t_next = state.t + 1

            def sink(fr, t_next=t_next):
                rec.frames.append({"step": t_next, **fr})

        state, next_obs, reward, done, info = step(state, action, sink)
        rec.steps.append(
            StepRecord(
                t=info["t"],
                action=action.as_array().tolist(),
                force_trace=info["force_trace"].tolist(),
                sensor_trace=info["sensor_trace"].tolist(),
                delta_f=info["delta_f"].tolist(),
                q=info["q"].tolist(),
                tau=info["tau"].tolist(),
                writhe=info["writhe"],
                ell=info["ell"],
                delta_ell=info["delta_ell"],
                reward=reward,
                reward_terms=info["reward_terms"],
                observation=next_obs.tolist(),
            )
        )
        obs = next_obs
    rec.success = state.success
    return rec
