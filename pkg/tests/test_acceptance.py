"""End-to-end acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line (with the measured numbers) that the
terminal summary prints under "acceptance criteria". Criteria 7, 8, 9 and 12
share three small trained policies, cached in pytest's cache directory.
"""
import time
import numpy as np
import pytest
from scipy import stats

from adqsim.adq import TAU_MAX, TAU_MIN, ThresholdState, force_difference, quantize, update_threshold
from adqsim.config import config_hash, preset
from adqsim.env import _settled_template, reset, run_episode
from adqsim.evalsuite import (
    MethodSpec,
    bootstrap_ci,
    holm_correct,
    measure_gap,
    net_factory,
    run_ablation_grid,
    threshold_sweep,
    wasserstein_1d,
    welch_one_sided,
)
from adqsim.geometry import make_knot, writhe
from adqsim.policy import (
    PolicyNet,
    RandomBaseline,
    TrainHyper,
    _to_batch,
    action_norm,
    collect,
    input_gradient,
    ppo_loss_and_grad,
    train,
)
from conftest import ACCEPTANCE_LINES
from oracles import gauss_writhe_quadrature, quantize_branches, trefoil_polyline

pytestmark = pytest.mark.slow

N_TRIALS = 30
TRAIN_SEED = 0
# desk-scale budget for one core; see the README
HYPER = TrainHyper(iterations=150, steps_per_iter=512, minibatch=128, epochs=8, lr=1e-3)
TRAINED_MODES = ("adq", "naive", "adq_fixed_tau")


def record(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


@pytest.fixture(scope="session")
def policies(request):
    """ADQ, Naive and fixed-threshold ADQ trained on the nominal preset."""
    cache = request.config.cache.mkdir("adqsim-acceptance")
    nets = {}
    for mode in TRAINED_MODES:
        cfg = preset("nominal", obs_mode=mode)
        key = f"{mode}-{cfg.config_hash()[:12]}-{config_hash(HYPER.to_dict())[:12]}-{TRAIN_SEED}"
        path = cache / f"{key}.bin"
        if path.is_file():
            nets[mode] = PolicyNet.load(path)
            continue
        net, _ = train(cfg, HYPER, TRAIN_SEED)
        net.save(path)
        # evaluate what was saved, so cached and fresh runs agree
        nets[mode] = PolicyNet.load(path)
    return nets


def test_criterion_01_quantization_oracle():
    rng = np.random.default_rng(1)
    n = 100_000
    tau = rng.uniform(TAU_MIN, TAU_MAX, n)
    delta = rng.uniform(-3.0, 3.0, n)
    # a tenth of the inputs sit exactly on a boundary
    edge = rng.random(n) < 0.1
    delta[edge] = np.where(rng.random(edge.sum()) < 0.5, -1.0, 1.0) * tau[edge]
    t0 = time.perf_counter()
    got = quantize(delta, tau)
    expected = np.array([quantize_branches(x, t) for x, t in zip(delta, tau)])
    elapsed = time.perf_counter() - t0
    mismatches = int(np.count_nonzero(got != expected))
    boundary_zero = bool(np.all(got[edge] == 0))
    ok = mismatches == 0 and boundary_zero and elapsed < 1.0
    record(1, ok, f"mismatches={mismatches} boundary->0={boundary_zero} runtime={elapsed:.3f}s")
    assert ok


def test_criterion_02_telescoping():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(10_000):
        K = int(rng.integers(1, 40))
        f = rng.normal(0.0, 10.0, size=(K + 1, 3))
        worst = max(worst, float(np.max(np.abs(force_difference(f) - (f[-1] - f[0]) / K))))
    ok = worst <= 1e-12
    record(2, ok, f"max |FD - (f_K - f_0)/K| = {worst:.2e} over 10^4 traces")
    assert ok


def test_criterion_03_writhe():
    t0 = time.perf_counter()
    p = trefoil_polyline()
    exact = writhe(p)
    ref = gauss_writhe_quadrature(p)
    rel = abs(exact - ref) / abs(ref)
    rng = np.random.default_rng(3)
    planar = 0.0
    mirror = 0.0
    for _ in range(200):
        n = int(rng.integers(4, 40))
        xy = rng.normal(size=(n, 2))
        planar = max(planar, abs(writhe(np.column_stack((xy, np.zeros(n))))))
        q = rng.normal(size=(n, 3))
        m = q * np.array([1.0, 1.0, -1.0])
        mirror = max(mirror, abs(writhe(q) + writhe(m)))
    knot = make_knot("loose_double", 64, 0.94, 0)
    mirror = max(mirror, abs(writhe(knot.vertices) + writhe(knot.vertices * np.array([1.0, -1.0, 1.0]))))
    elapsed = time.perf_counter() - t0
    ok = rel <= 0.02 and planar < 1e-9 and mirror < 1e-9 and elapsed < 30.0
    record(
        3,
        ok,
        f"trefoil Wr={exact:.5f} vs quadrature {ref:.5f} (rel {rel:.2e}); planar max {planar:.1e}; "
        f"mirror max {mirror:.1e}; runtime={elapsed:.1f}s",
    )
    assert ok


def test_criterion_04_threshold_containment():
    rng = np.random.default_rng(4)
    lo = hi = None
    outside = 0
    for _ in range(100_000):
        length = int(rng.integers(1, 16))
        # mix of saturating and interior actions
        acts = rng.uniform(-1.0, 1.0, size=(length, 3))
        acts[rng.random((length, 3)) < 0.3] = rng.choice([-1.0, 1.0])
        state = ThresholdState.initial(float(rng.uniform(TAU_MIN, TAU_MAX)))
        for a in acts:
            state = update_threshold(state, a)
        tau = state.tau
        outside += int(np.any(tau < TAU_MIN) or np.any(tau > TAU_MAX))
        lo = tau.min() if lo is None else min(lo, tau.min())
        hi = tau.max() if hi is None else max(hi, tau.max())
    ok = outside == 0
    record(4, ok, f"10^5 sequences, violations={outside}, observed tau range [{lo:.4f}, {hi:.4f}]")
    assert ok


def test_criterion_05_force_safety():
    details = []
    ok = True
    for name in ("nominal", "shifted"):
        cfg = preset(name)
        peak = 0.0
        longest = 0
        for s in range(100):
            rec = run_episode(RandomBaseline(), cfg, 3_000_000 + s)
            peak = max(peak, rec.peak_force)
            longest = max(longest, rec.n_steps)
        ok &= peak <= 30.0 and longest <= 15
        details.append(f"{name}: peak {peak:.2f} N, max pulls {longest}")
    record(5, ok, "; ".join(details))
    assert ok


def test_criterion_06_physics_sanity():
    cfg = preset("nominal")
    worst_edge = 0.0
    worst_pin = 0.0
    for seed in range(10):
        state, _ = reset(cfg, seed)
        chain = state.sim.chain
        worst_edge = max(worst_edge, float(np.max(np.abs(chain.edge_lengths() / chain.rest_length - 1.0))))
        ep = state.episode
        start = make_knot(cfg.knot_kind, cfg.n_vertices, cfg.knot_scale, ep.knot_seed)
        template = _settled_template(
            cfg.knot_kind, cfg.n_vertices, cfg.knot_scale, ep.knot_seed, ep.pin_index, ep.pull_index,
            cfg.physics, cfg.settle_steps,
        )
        worst_pin = max(worst_pin, float(np.linalg.norm(template.chain.vertices[ep.pin_index] - start.vertices[ep.pin_index])))
    a = run_episode(RandomBaseline(), cfg, 17, record_frames=True).to_jsonl()
    b = run_episode(RandomBaseline(), cfg, 17, record_frames=True).to_jsonl()
    replay = a == b
    ok = worst_edge <= 0.02 and worst_pin < 1e-9 and replay
    record(6, ok, f"max edge strain {worst_edge:.4%}; pin displacement {worst_pin:.1e} m; bitwise replay={replay}")
    assert ok


def _grid(nets, cfg, names):
    specs = [MethodSpec(n, nets.get(n)) for n in names]
    return run_ablation_grid(specs, cfg, N_TRIALS)


def test_criterion_07_learning_signal(policies):
    grid = _grid(policies, preset("nominal"), ["random", "adq"])
    adq = grid.results["adq"].writhe_reductions
    rnd = grid.results["random"].writhe_reductions
    res = welch_one_sided(adq, rnd, "less")
    ok = res.p < 0.05
    record(
        7,
        ok,
        f"nominal n={N_TRIALS}: ADQ {np.mean(adq):.3f} vs Random {np.mean(rnd):.3f}, "
        f"Welch t={res.t:.2f} df={res.df:.1f} p={res.p:.4f}",
    )
    assert ok


def test_criterion_08_transfer_ordering(policies):
    names = ["random", "opposite", "naive", "adq_fixed_tau", "adq"]
    grid = _grid(policies, preset("shifted"), names)
    means = {n: grid.results[n].mean_writhe_reduction for n in names}
    comps = grid.comparisons
    # more negative writhe reduction is better, so "at least as good" is <=
    ok = means["adq"] <= means["naive"] and means["adq"] <= means["adq_fixed_tau"]
    pvals = ", ".join(f"{n} p={comps[n]['p']:.3f}/holm {comps[n]['p_adj']:.3f}" for n in comps)
    record(
        8,
        ok,
        "shifted means: " + ", ".join(f"{n} {m:.3f}" for n, m in means.items()) + f"; ADQ vs: {pvals}",
    )
    assert ok


def test_criterion_09_gap_direction(policies):
    net = policies["adq"]
    rep = measure_gap(net_factory(net), preset("nominal"), preset("shifted"), 500, 150)
    raw, proc = rep.raw_mean, rep.processed_mean
    ok = proc[0] < raw[0] and proc[2] < raw[1]
    record(
        9,
        ok,
        f"raw W1 {raw[0]:.4f} [{raw[1]:.4f}, {raw[2]:.4f}] vs processed W1 {proc[0]:.4f} "
        f"[{proc[1]:.4f}, {proc[2]:.4f}] at n_a=500, n_b=150",
    )
    assert ok


def test_criterion_10_statistics_oracles():
    a, b = [1, 2, 3, 4], [5, 6, 7, 8]
    res = welch_one_sided(a, b, "less")
    ref = stats.ttest_ind(a, b, equal_var=False, alternative="less").pvalue
    welch_ok = abs(res.p - ref) < 1e-6
    crafted = {
        (0.01, 0.04, 0.03): [0.03, 0.06, 0.06],
        (0.2, 0.01, 0.5, 0.02): [0.4, 0.04, 0.5, 0.06],
        (0.04, 0.04): [0.08, 0.08],
        (0.6, 0.7): [1.0, 1.0],
    }
    holm_ok = all(np.array_equal(holm_correct(list(k)), np.array(v)) for k, v in crafted.items())
    rng = np.random.default_rng(10)
    w1_ok = True
    for _ in range(300):
        x, y, z = (rng.normal(rng.uniform(-3, 3), rng.uniform(0.1, 3), int(rng.integers(1, 60))) for _ in range(3))
        c = float(rng.uniform(-5, 5))
        w1_ok &= wasserstein_1d(x, x) == 0.0
        w1_ok &= abs(wasserstein_1d(x, x + c) - abs(c)) < 1e-9
        w1_ok &= abs(wasserstein_1d(x, y) - wasserstein_1d(y, x)) < 1e-12
        w1_ok &= wasserstein_1d(x, z) <= wasserstein_1d(x, y) + wasserstein_1d(y, z) + 1e-12
    ok = welch_ok and holm_ok and w1_ok
    record(10, ok, f"Welch p={res.p:.8f} vs scipy {ref:.8f}; Holm exact={holm_ok}; W1 properties={w1_ok}")
    assert ok


def test_criterion_11_gradient_check():
    cfg = preset("nominal")
    net = PolicyNet.init(11)
    # sharper mean head so the clipped and unclipped branches both occur
    net.params["Wmu"] *= 30.0
    episodes = collect(net, cfg, 0, 64)
    batch = _to_batch(net, episodes, 0.99, 0.95, 0.1)
    shifted = net.copy()
    shifted.set_flat(net.flat() + np.random.default_rng(0).normal(0, 0.02, net.flat().size))
    _, grads, _ = ppo_loss_and_grad(shifted, batch, 0.2, 0.5, 0.01)
    flat = shifted.flat()
    analytic = np.concatenate([grads[k].ravel() for k in shifted.params])
    idx = np.random.default_rng(1).choice(flat.size, 150, replace=False)
    h = 1e-6
    worst = 0.0
    for i in idx:
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        shifted.set_flat(up)
        lu = ppo_loss_and_grad(shifted, batch, 0.2, 0.5, 0.01)[0]
        shifted.set_flat(dn)
        ld = ppo_loss_and_grad(shifted, batch, 0.2, 0.5, 0.01)[0]
        fd = (lu - ld) / (2 * h)
        scale = abs(fd) + abs(analytic[i])
        if scale > 1e-7:
            worst = max(worst, abs(fd - analytic[i]) / scale)
    shifted.set_flat(flat)

    agree = total = 0
    for obs in batch.obs[:20]:
        grad = input_gradient(shifted, obs)
        for k in range(obs.size):
            e = np.zeros(obs.size)
            e[k] = 1e-6
            fd = (action_norm(shifted, obs + e) - action_norm(shifted, obs - e)) / 2e-6
            if abs(fd) < 1e-8:
                continue
            total += 1
            agree += int(np.sign(fd) == np.sign(grad[k]))
    frac = agree / max(total, 1)
    ok = worst < 1e-4 and frac >= 0.95 and total > 0
    record(11, ok, f"max relative gradient error {worst:.2e}; saliency sign agreement {frac:.1%} of {total} slots")
    assert ok


def test_criterion_12_threshold_sweep(policies):
    taus = [0.05, 0.15, 0.5, 1.0, 2.0]
    res = threshold_sweep(policies["adq_fixed_tau"], taus, preset("shifted"), N_TRIALS, adaptive_net=policies["adq"])
    best_tau, best_mean, (lo, hi) = res.best_fixed()
    half = 0.5 * (hi - lo)
    ok = res.adaptive_within_tolerance()
    curve = ", ".join(f"{t:g}:{m:.3f}" for t, m in zip(res.taus, res.means))
    record(
        12,
        ok,
        f"shifted sweep {curve}; best fixed tau={best_tau:g} mean {best_mean:.3f} (CI half-width {half:.3f}); "
        f"adaptive {res.adaptive_mean:.3f}",
    )
    assert ok
