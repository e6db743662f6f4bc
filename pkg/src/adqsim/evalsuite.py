"""Transfer evaluation, ablations, threshold sweep, observation gap and statistics."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats as _sstats

from .adq import ObservationMode
from .env import run_episode
from .errors import ConfigurationError, ContractViolation, UndefinedTestError
from .policy import NetPolicy, PolicyNet, map_ordered, scripted_baseline

EVAL_SEED_BASE = 1_000_000
GAP_SEED_BASE = 2_000_000

# grid order, scripted baselines first; display names follow the ablation labels
METHODS = (
    "random",
    "opposite",
    "naive",
    "naive_fixed_ternary",
    "naive_adaptive_ternary",
    "adq_no_ternary",
    "adq_fixed_tau",
    "adq",
)
DISPLAY = {
    "random": "Random",
    "opposite": "Opposite",
    "naive": "Naive",
    "naive_fixed_ternary": "Naive+Fix Ternary",
    "naive_adaptive_ternary": "Naive+Adaptive Ternary",
    "adq_no_ternary": "ADQ w/o Ternary",
    "adq_fixed_tau": "ADQ w/o Adaptive",
    "adq": "ADQ",
}
SCRIPTED = ("random", "opposite")


# statistics ---------------------------------------------------------------


def wasserstein_1d(a, b):
    """W1 between two empirical distributions, integrating |F_a - F_b| exactly."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ContractViolation("wasserstein_1d needs two non-empty samples")
    grid = np.concatenate((a, b))
    grid.sort(kind="mergesort")
    widths = np.diff(grid)
    fa = np.searchsorted(a, grid[:-1], side="right") / a.size
    fb = np.searchsorted(b, grid[:-1], side="right") / b.size
    return float(np.sum(np.abs(fa - fb) * widths))


def bootstrap_ci(samples, statistic=np.mean, resamples=2000, level=0.95, seed=0):
    """Percentile bootstrap; returns (estimate, lo, hi) with lo <= estimate <= hi."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 2:
        raise ContractViolation("bootstrap needs at least 2 samples")
    if not 0 < level < 1:
        raise ContractViolation("level must lie in (0, 1)")
    est = float(statistic(x))
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, x.size, size=(int(resamples), x.size))
    boots = np.array([statistic(x[row]) for row in idx]) if statistic is not np.mean else x[idx].mean(axis=1)
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(boots, [tail, 100.0 - tail])
    # a skewed resample distribution can leave the estimate just outside
    return est, float(min(lo, est)), float(max(hi, est))


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p: float


def welch_one_sided(a, b, alternative="less"):
    """One-sided Welch t-test of H1: mean(a) < mean(b) ('less') or > ('greater')."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise ContractViolation("Welch test needs at least 2 samples per group")
    if alternative not in ("less", "greater"):
        raise ContractViolation("alternative must be 'less' or 'greater'")
    va = a.var(ddof=1) / a.size
    vb = b.var(ddof=1) / b.size
    if va == 0.0 and vb == 0.0:
        raise UndefinedTestError("both samples have zero variance")
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    p = _sstats.t.cdf(t, df) if alternative == "less" else _sstats.t.sf(t, df)
    return WelchResult(float(t), float(df), float(p))


def holm_correct(pvals):
    """Holm step-down adjusted p-values, monotone in raw order and capped at 1."""
    p = np.asarray(pvals, dtype=np.float64).ravel()
    if p.size == 0:
        return np.zeros(0)
    if np.any((p < 0) | (p > 1)) or not np.all(np.isfinite(p)):
        raise ContractViolation("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="mergesort")
    adj_sorted = np.minimum(1.0, np.maximum.accumulate((m - np.arange(m)) * p[order]))
    out = np.empty(m)
    out[order] = adj_sorted
    return out


# evaluation ---------------------------------------------------------------


@dataclass
class EvalResult:
    method: str
    seeds: list
    writhe_reductions: list
    successes: list
    pulls: list
    peak_forces: list

    def __post_init__(self):
        n = len(self.seeds)
        if not (len(self.writhe_reductions) == len(self.successes) == len(self.pulls) == len(self.peak_forces) == n):
            raise ContractViolation("EvalResult lists must share one length")

    @property
    def n(self):
        return len(self.seeds)

    @property
    def mean_writhe_reduction(self):
        return float(np.mean(self.writhe_reductions))

    @property
    def success_rate(self):
        return float(np.mean(self.successes))

    def ci(self, seed=0, resamples=2000):
        return bootstrap_ci(self.writhe_reductions, resamples=resamples, seed=seed)

    @classmethod
    def from_records(cls, method, records):
        return cls(
            method=method,
            seeds=[r.seed for r in records],
            writhe_reductions=[r.writhe_reduction for r in records],
            successes=[bool(r.success) for r in records],
            pulls=[r.n_steps for r in records],
            peak_forces=[r.peak_force for r in records],
        )


@dataclass(frozen=True)
class MethodSpec:
    """A scripted baseline or a learned policy with its observation mode."""

    name: str
    net: object = None
    fixed_tau: float = None

    @property
    def scripted(self):
        return self.name in SCRIPTED

    @property
    def mode(self):
        return "adq" if self.scripted else ObservationMode(self.name).value


def eval_seeds(n_trials, base=EVAL_SEED_BASE):
    return [base + i for i in range(int(n_trials))]


def _episode_job(args):
    spec, config, seed = args
    policy = scripted_baseline(spec.name) if spec.scripted else NetPolicy(spec.net, deterministic=True)
    return run_episode(policy, config, seed)


def method_config(spec, eval_config):
    cfg = replace(eval_config, obs_mode=spec.mode)
    if spec.fixed_tau is not None:
        cfg = replace(cfg, fixed_tau=float(spec.fixed_tau))
    return cfg


def evaluate_method(spec, eval_config, seeds, workers=1):
    if not spec.scripted and spec.net is None:
        raise ConfigurationError(f"method {spec.name!r} needs a trained checkpoint")
    cfg = method_config(spec, eval_config)
    records = map_ordered(_episode_job, [(spec, cfg, s) for s in seeds], workers)
    return EvalResult.from_records(spec.name, records)


@dataclass
class GridResult:
    results: dict
    comparisons: dict = field(default_factory=dict)

    def rows(self):
        for name, res in self.results.items():
            for i in range(res.n):
                yield {
                    "method": name,
                    "seed": res.seeds[i],
                    "writhe_reduction": res.writhe_reductions[i],
                    "success": int(res.successes[i]),
                    "pulls": res.pulls[i],
                    "peak_force": res.peak_forces[i],
                }

    def to_csv(self):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["method", "seed", "writhe_reduction", "success", "pulls", "peak_force"], lineterminator="\n")
        w.writeheader()
        for row in self.rows():
            w.writerow(row)
        return buf.getvalue()

    def summary(self, seed=0):
        out = {}
        for name, res in self.results.items():
            mean, lo, hi = res.ci(seed=seed)
            entry = {
                "display": DISPLAY.get(name, name),
                "n": res.n,
                "mean": mean,
                "ci": [lo, hi],
                "success_rate": res.success_rate,
                "mean_pulls": float(np.mean(res.pulls)),
                "peak_force": float(np.max(res.peak_forces)) if res.n else 0.0,
            }
            if name in self.comparisons:
                entry.update(self.comparisons[name])
            out[name] = entry
        return out


def compare_to_reference(results, reference="adq"):
    """One-sided Welch (reference more negative) against every other method, Holm-adjusted."""
    ref = results[reference].writhe_reductions
    names = [n for n in results if n != reference]
    raw = []
    for n in names:
        try:
            raw.append(welch_one_sided(ref, results[n].writhe_reductions, "less").p)
        except UndefinedTestError:
            raw.append(float("nan"))
    valid = [i for i, p in enumerate(raw) if math.isfinite(p)]
    adj = [float("nan")] * len(raw)
    for i, a in zip(valid, holm_correct([raw[i] for i in valid])):
        adj[i] = float(a)
    return {n: {"p": raw[i], "p_adj": adj[i]} for i, n in enumerate(names)}


def run_ablation_grid(methods, eval_config, n_trials, seeds=None, workers=1):
    """Evaluate every method on the same episode seeds and test ADQ against the rest."""
    seeds = list(seeds) if seeds is not None else eval_seeds(n_trials)
    if len(seeds) != int(n_trials):
        raise ContractViolation("need exactly n_trials seeds")
    for spec in methods:
        if not spec.scripted and spec.net is None:
            raise ConfigurationError(f"method {spec.name!r} is missing its checkpoint")
    results = {spec.name: evaluate_method(spec, eval_config, seeds, workers) for spec in methods}
    comps = compare_to_reference(results) if "adq" in results and len(results) > 1 else {}
    return GridResult(results, comps)


@dataclass
class SweepResult:
    taus: list
    means: list
    cis: list
    adaptive_mean: float = None
    adaptive_ci: tuple = None
    results: list = field(default_factory=list)

    @property
    def best_index(self):
        return int(np.argmin(self.means))

    def best_fixed(self):
        i = self.best_index
        return self.taus[i], self.means[i], self.cis[i]

    def adaptive_within_tolerance(self):
        """Adaptive mean at least as good as the best fixed mean, less one CI half-width.

        Writhe reduction is better when more negative.
        """
        _, best, (lo, hi) = self.best_fixed()
        half = 0.5 * (hi - lo)
        return self.adaptive_mean <= best + half

    def to_dict(self):
        return {
            "taus": self.taus,
            "means": self.means,
            "cis": [list(c) for c in self.cis],
            "adaptive_mean": self.adaptive_mean,
            "adaptive_ci": list(self.adaptive_ci) if self.adaptive_ci else None,
            "best_tau": self.best_fixed()[0] if self.taus else None,
        }


def threshold_sweep(net, taus, eval_config, n_trials, adaptive_net=None, seeds=None, workers=1, ci_seed=0):
    """Evaluate a fixed-threshold policy at each tau (and optionally the adaptive one)."""
    taus = [float(t) for t in taus]
    if not taus:
        raise ContractViolation("tau list must not be empty")
    seeds = list(seeds) if seeds is not None else eval_seeds(n_trials)
    out = SweepResult([], [], [])
    for tau in taus:
        res = evaluate_method(MethodSpec("adq_fixed_tau", net, fixed_tau=tau), eval_config, seeds, workers)
        mean, lo, hi = res.ci(seed=ci_seed)
        out.taus.append(tau)
        out.means.append(mean)
        out.cis.append((lo, hi))
        out.results.append(res)
    if adaptive_net is not None:
        res = evaluate_method(MethodSpec("adq", adaptive_net), eval_config, seeds, workers)
        mean, lo, hi = res.ci(seed=ci_seed)
        out.adaptive_mean = mean
        out.adaptive_ci = (lo, hi)
    return out


# observation gap ------------------------------------------------------------


@dataclass
class GapReport:
    n_a: int
    n_b: int
    raw_w1: list
    processed_w1: list
    raw_mean: tuple
    processed_mean: tuple

    def to_dict(self):
        return {
            "n_a": self.n_a,
            "n_b": self.n_b,
            "raw": {"per_axis": self.raw_w1, "mean": self.raw_mean[0], "ci": list(self.raw_mean[1:])},
            "processed": {
                "per_axis": self.processed_w1,
                "mean": self.processed_mean[0],
                "ci": list(self.processed_mean[1:]),
            },
        }

    @property
    def reduction(self):
        return 1.0 - self.processed_mean[0] / self.raw_mean[0] if self.raw_mean[0] > 0 else 0.0


def collect_step_samples(policy_factory, config, n_steps, seed_base=GAP_SEED_BASE, workers=1):
    """Per-step (raw f_K, processed q) samples, episode by episode in seed order."""
    raw, proc = [], []
    idx = 0
    while len(raw) < n_steps:
        wave = max(1, workers)
        jobs = [(policy_factory, config, seed_base + idx + w) for w in range(wave)]
        idx += wave
        for rec in map_ordered(_gap_job, jobs, workers):
            for s in rec.steps:
                if len(raw) >= n_steps:
                    break
                raw.append(s.sensor_trace[-1])
                proc.append(s.q)
    return np.array(raw), np.array(proc)


def _gap_job(args):
    factory, config, seed = args
    return run_episode(factory(), config, seed)


def _mean_w1(a, b):
    return float(np.mean([wasserstein_1d(a[:, k], b[:, k]) for k in range(a.shape[1])]))


def _bootstrap_w1(a, b, resamples, seed):
    rng = np.random.default_rng(seed)
    est = _mean_w1(a, b)
    vals = np.empty(resamples)
    for r in range(resamples):
        ia = rng.integers(0, a.shape[0], a.shape[0])
        ib = rng.integers(0, b.shape[0], b.shape[0])
        vals[r] = _mean_w1(a[ia], b[ib])
    lo, hi = np.percentile(vals, [2.5, 97.5])
    return est, float(min(lo, est)), float(max(hi, est))


def measure_gap(policy_factory, config_a, config_b, n_a, n_b, resamples=2000, seed=0, workers=1):
    """Per-axis W1 between two configs for raw forces and processed observations.

    ``policy_factory()`` returns a fresh policy handle; both configs use the
    same episode seeds, so identical configs give a zero gap.
    """
    if int(n_a) < 2 or int(n_b) < 2:
        raise ContractViolation("need at least 2 step samples per config")
    raw_a, proc_a = collect_step_samples(policy_factory, config_a, int(n_a), workers=workers)
    raw_b, proc_b = collect_step_samples(policy_factory, config_b, int(n_b), workers=workers)
    return GapReport(
        n_a=int(n_a),
        n_b=int(n_b),
        raw_w1=[wasserstein_1d(raw_a[:, k], raw_b[:, k]) for k in range(3)],
        processed_w1=[wasserstein_1d(proc_a[:, k], proc_b[:, k]) for k in range(3)],
        raw_mean=_bootstrap_w1(raw_a, raw_b, resamples, seed),
        processed_mean=_bootstrap_w1(proc_a, proc_b, resamples, seed + 1),
    )


def net_factory(net):
    """Picklable policy factory for ``measure_gap``."""
    return _NetFactory(net)


class _NetFactory:
    def __init__(self, net):
        self.net = net

    def __call__(self):
        return NetPolicy(self.net, deterministic=True)


def load_method(name, checkpoint_path=None):
    if name in SCRIPTED:
        return MethodSpec(name)
    if checkpoint_path is None:
        raise ConfigurationError(f"method {name!r} needs a checkpoint")
    return MethodSpec(name, PolicyNet.load(checkpoint_path))


def summary_json(grid, seed=0):
    return json.dumps(grid.summary(seed=seed), sort_keys=True, indent=2)
