"""Adaptive force-difference quantization of force observations.

A pull produces a short force trace; its mean intra-pull difference is
quantized per axis to {-1, 0, +1} against thresholds that the policy itself
nudges every step. Observations are stacked over the last ``H`` steps.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DegenerateGeometryError, MalformedTraceError

TAU_MIN = 0.005
TAU_MAX = 2.5
TAU_INIT = 0.15
DELTA_MAX = 0.1
STACK_DEPTH = 5
OBS_DIM = 9


class ObservationMode(str, enum.Enum):
    ADQ = "adq"
    ADQ_NO_TERNARY = "adq_no_ternary"
    ADQ_FIXED_TAU = "adq_fixed_tau"
    NAIVE = "naive"
    NAIVE_FIXED_TERNARY = "naive_fixed_ternary"
    NAIVE_ADAPTIVE_TERNARY = "naive_adaptive_ternary"

    @property
    def uses_difference(self):
        return self in (ObservationMode.ADQ, ObservationMode.ADQ_NO_TERNARY, ObservationMode.ADQ_FIXED_TAU)

    @property
    def ternary(self):
        return self not in (ObservationMode.ADQ_NO_TERNARY, ObservationMode.NAIVE)

    @property
    def adaptive(self):
        return self in (ObservationMode.ADQ, ObservationMode.NAIVE_ADAPTIVE_TERNARY)


@dataclass(frozen=True)
class ForceTrace:
    """Forces sampled during one pull, ``samples[k]`` for k = 0..K (Newtons)."""

    samples: np.ndarray

    def __post_init__(self):
        arr = np.array(self.samples, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise MalformedTraceError(f"trace must be (K+1, 3), got {arr.shape}")
        if arr.shape[0] < 2:
            raise MalformedTraceError("trace needs at least 2 samples")
        if not np.all(np.isfinite(arr)):
            raise MalformedTraceError("trace contains non-finite samples")
        arr.flags.writeable = False
        object.__setattr__(self, "samples", arr)

    @property
    def K(self):
        return self.samples.shape[0] - 1

    @property
    def last(self):
        return self.samples[-1]


def _samples(trace):
    if isinstance(trace, ForceTrace):
        return trace.samples
    return ForceTrace(trace).samples


def force_difference(trace):
    """Average of the intra-pull differences f[k] - f[k-1], k = 1..K."""
    f = _samples(trace)
    K = f.shape[0] - 1
    return np.diff(f, axis=0).sum(axis=0) / K


def quantize(delta, tau):
    """Ternary quantization: -1 below -tau, +1 above tau, 0 on [-tau, tau].

    Broadcasts, so a batch of deltas can be quantized in one call.
    """
    delta = np.asarray(delta, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    if np.any(~(tau > 0)):
        raise ContractViolation("quantization thresholds must be positive")
    return np.where(delta > tau, 1, np.where(delta < -tau, -1, 0)).astype(np.int8)


@dataclass(frozen=True)
class ThresholdState:
    tau: np.ndarray
    last_delta: np.ndarray
    tau_min: float = TAU_MIN
    tau_max: float = TAU_MAX
    tau_init: float = TAU_INIT
    delta_max: float = DELTA_MAX

    def __post_init__(self):
        tau = np.array(self.tau, dtype=np.float64).reshape(3)
        last = np.array(self.last_delta, dtype=np.float64).reshape(3)
        if not self.tau_min > 0:
            raise ContractViolation("tau_min must be positive")
        if self.tau_min > self.tau_max:
            raise ContractViolation("tau_min must not exceed tau_max")
        if np.any(tau < self.tau_min) or np.any(tau > self.tau_max):
            raise ContractViolation(f"tau {tau} outside [{self.tau_min}, {self.tau_max}]")
        tau.flags.writeable = False
        last.flags.writeable = False
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "last_delta", last)

    @classmethod
    def initial(cls, tau_init=TAU_INIT, tau_min=TAU_MIN, tau_max=TAU_MAX, delta_max=DELTA_MAX):
        return cls(np.full(3, float(tau_init)), np.zeros(3), tau_min, tau_max, tau_init, delta_max)


def update_threshold(state, delta_tau_action):
    """Apply a raw threshold action in [-1, 1]^3, scaled by ``delta_max`` and clamped."""
    act = np.asarray(delta_tau_action, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(act)):
        raise ContractViolation("threshold action must be finite")
    proposed = state.tau + state.delta_max * act
    tau = np.clip(proposed, state.tau_min, state.tau_max)
    return ThresholdState(
        tau, tau - state.tau, state.tau_min, state.tau_max, state.tau_init, state.delta_max
    )


@dataclass(frozen=True)
class Observation:
    q: np.ndarray
    last_delta_tau: np.ndarray
    z: np.ndarray

    def as_array(self):
        return np.concatenate((self.q, self.last_delta_tau, self.z)).astype(np.float64)


def _unit(v):
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise DegenerateGeometryError("pin and pull positions coincide")
    return v / n


def build_observation(trace, thresholds, pin, pull, mode):
    """Single-step observation ``[force slots, last threshold update, pin->pull direction]``."""
    mode = ObservationMode(mode)
    f = _samples(trace)
    signal = force_difference(f) if mode.uses_difference else f[-1].copy()
    first = quantize(signal, thresholds.tau).astype(np.float64) if mode.ternary else signal
    last = np.array(thresholds.last_delta) if mode.adaptive else np.zeros(3)
    z = _unit(np.asarray(pull, dtype=np.float64) - np.asarray(pin, dtype=np.float64))
    return Observation(first, last, z)


class ObservationStack:
    """Ring buffer of the last ``depth`` observations, zero-padded, oldest first."""

    def __init__(self, depth=STACK_DEPTH, width=OBS_DIM):
        self.depth = depth
        self.width = width
        self._buf = np.zeros((depth, width))
        self.count = 0

    def push(self, obs):
        row = obs.as_array() if isinstance(obs, Observation) else np.asarray(obs, dtype=np.float64)
        if row.shape != (self.width,):
            raise ContractViolation(f"observation must have {self.width} entries")
        self._buf = np.roll(self._buf, -1, axis=0)
        self._buf[-1] = row
        self.count += 1
        return self.flat()

    def flat(self):
        return self._buf.reshape(-1).copy()

    def clear(self):
        self._buf[:] = 0.0
        self.count = 0


def push_and_flatten(stack, obs):
    return stack.push(obs)
