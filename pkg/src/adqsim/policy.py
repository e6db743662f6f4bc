"""Policy network, on-policy trainer and scripted baselines.

The network is a small tanh MLP written directly in numpy with hand-derived
gradients: a shared two-layer trunk feeds a 6-dim action-mean head and a
scalar value head. Actions follow a tanh-squashed diagonal Gaussian whose
log-std parameters are clamped to [-5, 1]. Training is a clipped-surrogate
actor-critic with generalized advantage estimation.
"""
from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .config import SimConfig
from .env import STREAM_POLICY, EpisodeRecord, StepAction, reset, run_episode, step, substream
from .errors import ConfigurationError, ContractViolation, TrainingAborted

OBS_SIZE = 45
ACT_SIZE = 6
LOG_STD_MIN = -5.0
LOG_STD_MAX = 1.0
_LOG_2PI = math.log(2.0 * math.pi)
_LAYERS = ("W1", "b1", "W2", "b2", "Wmu", "bmu", "Wv", "bv", "log_std")
_MAGIC = b"ADQNET01"


class PolicyNet:
    """Feed-forward actor-critic with a shared trunk.

    Parameters live in ``self.params`` (float64 arrays keyed by layer name).
    """

    def __init__(self, params, mode="adq", config_hash=""):
        missing = [k for k in _LAYERS if k not in params]
        if missing:
            raise ConfigurationError(f"network parameters missing {missing}")
        self.params = {k: np.array(params[k], dtype=np.float64) for k in _LAYERS}
        if self.params["W1"].shape[0] != OBS_SIZE or self.params["Wmu"].shape[1] != ACT_SIZE:
            raise ConfigurationError("network must map 45 inputs to 6 action means")
        self.mode = str(mode)
        self.config_hash = str(config_hash)

    @classmethod
    def init(cls, seed, hidden=64, mode="adq", config_hash=""):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(0xC0DE,)))

        def layer(n_in, n_out, gain):
            return rng.normal(0.0, gain / math.sqrt(n_in), size=(n_in, n_out))

        params = {
            "W1": layer(OBS_SIZE, hidden, 1.0),
            "b1": np.zeros(hidden),
            "W2": layer(hidden, hidden, 1.0),
            "b2": np.zeros(hidden),
            "Wmu": layer(hidden, ACT_SIZE, 0.01),
            "bmu": np.zeros(ACT_SIZE),
            "Wv": layer(hidden, 1, 1.0),
            "bv": np.zeros(1),
            "log_std": np.full(ACT_SIZE, -0.5),
        }
        return cls(params, mode, config_hash)

    @property
    def hidden(self):
        return self.params["W1"].shape[1]

    def copy(self):
        return PolicyNet({k: v.copy() for k, v in self.params.items()}, self.mode, self.config_hash)

    def flat(self):
        return np.concatenate([self.params[k].ravel() for k in _LAYERS])

    def set_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        off = 0
        for k in _LAYERS:
            size = self.params[k].size
            self.params[k] = vec[off : off + size].reshape(self.params[k].shape).copy()
            off += size
        if off != vec.size:
            raise ContractViolation("flat parameter vector has the wrong length")

    def is_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.params.values())

    def log_std(self):
        return np.clip(self.params["log_std"], LOG_STD_MIN, LOG_STD_MAX)

    def forward(self, obs):
        """Returns (pre-squash mean, value, cache) for a batch of observations."""
        P = self.params
        x = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        h1 = np.tanh(x @ P["W1"] + P["b1"])
        h2 = np.tanh(h1 @ P["W2"] + P["b2"])
        mu = h2 @ P["Wmu"] + P["bmu"]
        v = (h2 @ P["Wv"] + P["bv"])[:, 0]
        return mu, v, (x, h1, h2)

    def value(self, obs):
        return self.forward(obs)[1]

    def backward(self, cache, d_mu, d_v):
        """Parameter gradients given upstream gradients on mu and value."""
        P = self.params
        x, h1, h2 = cache
        g = {}
        g["Wmu"] = h2.T @ d_mu
        g["bmu"] = d_mu.sum(axis=0)
        g["Wv"] = h2.T @ d_v[:, None]
        g["bv"] = np.array([d_v.sum()])
        d_h2 = d_mu @ P["Wmu"].T + d_v[:, None] @ P["Wv"].T
        d_a2 = d_h2 * (1.0 - h2 * h2)
        g["W2"] = h1.T @ d_a2
        g["b2"] = d_a2.sum(axis=0)
        d_h1 = d_a2 @ P["W2"].T
        d_a1 = d_h1 * (1.0 - h1 * h1)
        g["W1"] = x.T @ d_a1
        g["b1"] = d_a1.sum(axis=0)
        return g, d_a1 @ P["W1"].T

    # checkpoint I/O -------------------------------------------------------
    def to_bytes(self):
        header = {
            "format": "adqsim-policy",
            "version": 1,
            "mode": self.mode,
            "config_hash": self.config_hash,
            "layers": [[k, list(self.params[k].shape)] for k in _LAYERS],
            "dtype": "<f4",
        }
        head = json.dumps(header, sort_keys=True).encode("utf-8")
        body = self.flat().astype("<f4").tobytes()
        return _MAGIC + struct.pack("<I", len(head)) + head + body

    @classmethod
    def from_bytes(cls, data):
        if data[: len(_MAGIC)] != _MAGIC:
            raise ConfigurationError("not a policy checkpoint (bad magic)")
        off = len(_MAGIC)
        (hlen,) = struct.unpack("<I", data[off : off + 4])
        off += 4
        try:
            header = json.loads(data[off : off + hlen].decode("utf-8"))
        except ValueError as exc:
            raise ConfigurationError(f"corrupt checkpoint header: {exc}") from None
        off += hlen
        body = np.frombuffer(data[off:], dtype="<f4").astype(np.float64)
        params = {}
        pos = 0
        for name, shape in header["layers"]:
            size = int(np.prod(shape))
            if pos + size > body.size:
                raise ConfigurationError("checkpoint body is truncated")
            params[name] = body[pos : pos + size].reshape(shape)
            pos += size
        if pos != body.size:
            raise ConfigurationError("checkpoint body has trailing data")
        return cls(params, header.get("mode", "adq"), header.get("config_hash", ""))

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def gaussian_logp(x, mu, log_std):
    z = (x - mu) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * _LOG_2PI, axis=-1)


def act(net, obs, rng=None, deterministic=False):
    """Sample (or take the mean of) the squashed Gaussian policy.

    Returns ``(StepAction, pre_squash, log_prob, value)``; ``log_prob`` is the
    Gaussian density of the pre-squash sample, which is all the ratio in the
    surrogate objective needs.
    """
    obs = np.asarray(obs, dtype=np.float64).reshape(-1)
    if obs.shape != (OBS_SIZE,) or not np.all(np.isfinite(obs)):
        raise ContractViolation("observation must be 45 finite numbers")
    mu, v, _ = net.forward(obs)
    mu = mu[0]
    log_std = net.log_std()
    if deterministic:
        pre = mu.copy()
    else:
        if rng is None:
            raise ContractViolation("stochastic action needs an rng")
        pre = mu + np.exp(log_std) * rng.standard_normal(ACT_SIZE)
    a = np.tanh(pre)
    return StepAction(a[:3], a[3:]), pre, float(gaussian_logp(pre, mu, log_std)), float(v[0])


# baselines and policy handles -------------------------------------------


class NetPolicy:
    """Handle that drives an episode with a network."""

    def __init__(self, net, deterministic=True):
        self.net = net
        self.deterministic = deterministic
        self.rng = None

    def reset(self, rng):
        self.rng = rng

    def __call__(self, obs, info):
        return act(self.net, obs, self.rng, self.deterministic)[0].as_array()


class RandomBaseline:
    """One uniformly random unit pull direction, held for the whole episode."""

    def reset(self, rng):
        d = rng.standard_normal(3)
        self.u = d / np.linalg.norm(d)

    def __call__(self, obs, info):
        return np.concatenate((self.u, np.zeros(3)))


class OppositeBaseline:
    """Pull straight away from the pin hand."""

    def reset(self, rng):
        pass

    def __call__(self, obs, info):
        d = np.asarray(info["pull"], dtype=np.float64) - np.asarray(info["pin"], dtype=np.float64)
        n = float(np.linalg.norm(d))
        u = d / n if n > 0 else np.zeros(3)
        return np.concatenate((u, np.zeros(3)))


def scripted_baseline(kind):
    if kind == "random":
        return RandomBaseline()
    if kind == "opposite":
        return OppositeBaseline()
    raise ConfigurationError(f"unknown baseline {kind!r}; expected 'random' or 'opposite'")


# saliency ---------------------------------------------------------------


def _mean_norm(net, obs):
    mu, _, cache = net.forward(obs)
    a = np.tanh(mu[0])
    return float(np.linalg.norm(a)), a, mu, cache


def saliency(net, obs):
    """Gradient-times-input attribution of the squashed action-mean norm.

    Returns ``(per_slot, per_step)`` with 45 and 5 entries; ``per_step`` sums
    each 9-slot history group, oldest first.
    """
    obs = np.asarray(obs, dtype=np.float64).reshape(OBS_SIZE)
    norm, a, mu, cache = _mean_norm(net, obs)
    if norm == 0.0:
        grad = np.zeros(OBS_SIZE)
    else:
        d_mu = (a / norm * (1.0 - a * a))[None, :]
        _, d_x = net.backward(cache, d_mu, np.zeros(1))
        grad = d_x[0]
    per_slot = grad * obs
    return per_slot, per_slot.reshape(5, -1).sum(axis=1)


def input_gradient(net, obs):
    obs = np.asarray(obs, dtype=np.float64).reshape(OBS_SIZE)
    norm, a, mu, cache = _mean_norm(net, obs)
    if norm == 0.0:
        return np.zeros(OBS_SIZE)
    d_mu = (a / norm * (1.0 - a * a))[None, :]
    return net.backward(cache, d_mu, np.zeros(1))[1][0]


def action_norm(net, obs):
    return _mean_norm(net, np.asarray(obs, dtype=np.float64))[0]


# training ---------------------------------------------------------------


@dataclass(frozen=True)
class TrainHyper:
    iterations: int = 300
    steps_per_iter: int = 2048
    epochs: int = 4
    minibatch: int = 256
    lr: float = 3e-4
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    vf_coef: float = 0.5
    ent_coef: float = 0.0
    max_grad_norm: float = 0.5
    # rewards are multiplied by this before GAE so value targets stay O(1)
    reward_scale: float = 0.1
    hidden: int = 64
    workers: int = 1

    def __post_init__(self):
        if int(self.iterations) < 0:
            raise ConfigurationError("iterations must be >= 0")
        for name in ("steps_per_iter", "epochs", "minibatch", "hidden", "workers"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if not self.reward_scale > 0:
            raise ConfigurationError("reward_scale must be positive")
        if not self.lr > 0 or not 0 < self.clip < 1:
            raise ConfigurationError("lr must be positive and clip in (0, 1)")
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ConfigurationError("gamma and lam must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainReport:
    iteration: int
    steps: int
    episodes: int
    mean_return: float
    success_rate: float
    mean_writhe_reduction: float
    policy_loss: float
    value_loss: float
    entropy: float
    approx_kl: float
    wall_clock: float

    def to_dict(self):
        return asdict(self)


@dataclass
class Batch:
    obs: np.ndarray
    pre: np.ndarray
    logp: np.ndarray
    adv: np.ndarray
    ret: np.ndarray


def ppo_loss_and_grad(net, batch, clip, vf_coef, ent_coef):
    """Clipped surrogate + value + entropy loss and its exact gradient.

    Returns ``(loss, grads, stats)``; ``grads`` is keyed like ``net.params``.
    """
    n = batch.obs.shape[0]
    mu, v, cache = net.forward(batch.obs)
    raw_ls = net.params["log_std"]
    log_std = np.clip(raw_ls, LOG_STD_MIN, LOG_STD_MAX)
    inv_var = np.exp(-2.0 * log_std)
    diff = batch.pre - mu
    logp = np.sum(-0.5 * diff * diff * inv_var - log_std - 0.5 * _LOG_2PI, axis=1)
    ratio = np.exp(logp - batch.logp)
    adv = batch.adv
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    use_unclipped = unclipped <= clipped
    surr = np.where(use_unclipped, unclipped, clipped)
    policy_loss = -float(np.mean(surr))
    value_loss = float(np.mean((v - batch.ret) ** 2))
    entropy = float(np.sum(log_std + 0.5 * (_LOG_2PI + 1.0)))
    loss = policy_loss + vf_coef * value_loss - ent_coef * entropy

    # d(policy_loss)/d(logp): only the unclipped branch carries gradient
    d_logp = np.where(use_unclipped, -adv * ratio / n, 0.0)
    d_mu = d_logp[:, None] * diff * inv_var
    d_ls = np.sum(d_logp[:, None] * (diff * diff * inv_var - 1.0), axis=0) - ent_coef
    d_ls = np.where((raw_ls >= LOG_STD_MIN) & (raw_ls <= LOG_STD_MAX), d_ls, 0.0)
    d_v = vf_coef * 2.0 * (v - batch.ret) / n
    grads, _ = net.backward(cache, d_mu, d_v)
    grads["log_std"] = d_ls
    stats = {
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "approx_kl": float(np.mean(batch.logp - logp)),
    }
    return loss, grads, stats


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in params:
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def gae(rewards, values, dones, last_value, gamma, lam):
    """Generalized advantage estimates and returns for one trajectory."""
    T = len(rewards)
    adv = np.zeros(T)
    acc = 0.0
    for t in range(T - 1, -1, -1):
        nxt = last_value if t == T - 1 else values[t + 1]
        nonterminal = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * nxt * nonterminal - values[t]
        acc = delta + gamma * lam * nonterminal * acc
        adv[t] = acc
    return adv, adv + np.asarray(values)


def episode_seed(iteration, index):
    """Training episode seeds; evaluation uses a disjoint range."""
    return int(iteration) * 100_000 + int(index)


def rollout(net, config, ep_seed):
    """One stochastic training episode; returns a dict of per-step arrays."""
    state, obs = reset(config, ep_seed)
    rng = substream(config.seed, ep_seed, STREAM_POLICY, state.episode.attempt)
    out = {"obs": [], "pre": [], "logp": [], "value": [], "reward": [], "done": []}
    while not state.done:
        action, pre, logp, value = act(net, obs, rng)
        out["obs"].append(obs)
        out["pre"].append(pre)
        out["logp"].append(logp)
        out["value"].append(value)
        state, obs, reward, done, _info = step(state, action)
        out["reward"].append(reward)
        out["done"].append(done)
    out["success"] = state.success
    out["writhe_reduction"] = state.writhe - state.writhe_initial
    return out


def _rollout_job(args):
    net, config, ep_seed = args
    return rollout(net, config, ep_seed)


def map_ordered(fn, jobs, workers):
    """Apply ``fn`` to ``jobs`` in order, in a process pool when workers > 1."""
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    import multiprocessing as mp

    ctx = mp.get_context("fork") if "fork" in mp.get_all_start_methods() else mp.get_context()
    with ctx.Pool(workers) as pool:
        return pool.map(fn, jobs, chunksize=1)


def collect(net, config, iteration, steps_target, workers=1):
    """Run episodes in seed order until ``steps_target`` steps are gathered.

    Episodes are scheduled in waves of ``workers`` but only the prefix needed
    to reach the target is kept, so the batch is independent of worker count.
    """
    episodes = []
    steps = 0
    idx = 0
    while steps < steps_target:
        wave = [(net, config, episode_seed(iteration, idx + w)) for w in range(max(1, workers))]
        idx += len(wave)
        for ep in map_ordered(_rollout_job, wave, workers):
            if steps >= steps_target:
                break
            episodes.append(ep)
            steps += len(ep["reward"])
    return episodes


def _to_batch(net, episodes, gamma, lam, reward_scale=1.0):
    obs, pre, logp, adv, ret = [], [], [], [], []
    for ep in episodes:
        rewards = [reward_scale * r for r in ep["reward"]]
        a, r = gae(rewards, ep["value"], ep["done"], 0.0, gamma, lam)
        obs.extend(ep["obs"])
        pre.extend(ep["pre"])
        logp.extend(ep["logp"])
        adv.append(a)
        ret.append(r)
    adv = np.concatenate(adv)
    adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    return Batch(np.array(obs), np.array(pre), np.array(logp), adv, np.concatenate(ret))


def _clip_grads(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        f = max_norm / (total + 1e-12)
        return {k: g * f for k, g in grads.items()}, total
    return grads, total


def train_iter(config, hyper, seed, net=None):
    """Generator of ``(net, TrainReport)`` per iteration.

    Reproducible given ``seed``; worker count changes only wall-clock.
    """
    if not isinstance(config, SimConfig):
        raise ConfigurationError("train needs a SimConfig")
    config = config if config.seed == seed else _with_seed(config, seed)
    if net is None:
        net = PolicyNet.init(seed, hyper.hidden, config.obs_mode, config.config_hash())
    opt = Adam(net.params, hyper.lr)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(0x5EED,)))
    for it in range(int(hyper.iterations)):
        t0 = time.perf_counter()
        frozen = net.copy()
        episodes = collect(frozen, config, it, hyper.steps_per_iter, hyper.workers)
        batch = _to_batch(frozen, episodes, hyper.gamma, hyper.lam, hyper.reward_scale)
        n = batch.obs.shape[0]
        stats_acc = []
        for _ in range(int(hyper.epochs)):
            order = shuffle_rng.permutation(n)
            for start in range(0, n, int(hyper.minibatch)):
                sel = order[start : start + int(hyper.minibatch)]
                mb = Batch(batch.obs[sel], batch.pre[sel], batch.logp[sel], batch.adv[sel], batch.ret[sel])
                loss, grads, stats = ppo_loss_and_grad(net, mb, hyper.clip, hyper.vf_coef, hyper.ent_coef)
                if not math.isfinite(loss):
                    raise TrainingAborted(f"non-finite loss at iteration {it}", frozen)
                grads, _ = _clip_grads(grads, hyper.max_grad_norm)
                opt.step(net.params, grads)
                if not net.is_finite():
                    raise TrainingAborted(f"non-finite parameters at iteration {it}", frozen)
                stats_acc.append(stats)
        report = TrainReport(
            iteration=it,
            steps=n,
            episodes=len(episodes),
            mean_return=float(np.mean([sum(e["reward"]) for e in episodes])),
            success_rate=float(np.mean([e["success"] for e in episodes])),
            mean_writhe_reduction=float(np.mean([e["writhe_reduction"] for e in episodes])),
            policy_loss=float(np.mean([s["policy_loss"] for s in stats_acc])),
            value_loss=float(np.mean([s["value_loss"] for s in stats_acc])),
            entropy=float(np.mean([s["entropy"] for s in stats_acc])),
            approx_kl=float(np.mean([s["approx_kl"] for s in stats_acc])),
            wall_clock=time.perf_counter() - t0,
        )
        yield net, report


def train(config, hyper, seed, on_iteration=None):
    """Train and return ``(net, reports)``.

    ``on_iteration(net, report)`` runs after every iteration (for
    checkpointing). On a non-finite loss ``TrainingAborted`` is raised; its
    ``args[1]`` is the last good network.
    """
    reports = []
    net = PolicyNet.init(seed, hyper.hidden, config.obs_mode, _with_seed(config, seed).config_hash())
    if int(hyper.iterations) == 0:
        return net, reports
    for net, rep in train_iter(config, hyper, seed, net):
        reports.append(rep)
        if on_iteration is not None:
            on_iteration(net, rep)
    return net, reports


def _with_seed(config, seed):
    from dataclasses import replace

    return replace(config, seed=int(seed))


def evaluate_policy(policy, config, seeds):
    """Run ``policy`` once per seed; returns the list of EpisodeRecords."""
    return [run_episode(policy, config, s) for s in seeds]


__all__ = [
    "PolicyNet",
    "TrainHyper",
    "TrainReport",
    "act",
    "train",
    "train_iter",
    "scripted_baseline",
    "saliency",
    "NetPolicy",
    "RandomBaseline",
    "OppositeBaseline",
    "ppo_loss_and_grad",
    "EpisodeRecord",
]
