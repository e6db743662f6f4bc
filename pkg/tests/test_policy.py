import numpy as np
import pytest

from adqsim.config import preset
from adqsim.errors import ConfigurationError, ContractViolation
from adqsim.policy import (
    Adam,
    Batch,
    NetPolicy,
    OppositeBaseline,
    PolicyNet,
    RandomBaseline,
    TrainHyper,
    act,
    collect,
    gae,
    input_gradient,
    action_norm,
    ppo_loss_and_grad,
    saliency,
    scripted_baseline,
    train,
)


def frozen_batch(net, n=32, seed=0):
    rng = np.random.default_rng(seed)
    obs = rng.normal(size=(n, 45))
    mu, _, _ = net.forward(obs)
    pre = mu + 0.3 * rng.normal(size=mu.shape)
    # old log-probs slightly off so some ratios are clipped and some are not
    logp_new = -0.5 * np.sum(((pre - mu) / np.exp(net.log_std())) ** 2, axis=1)
    logp = logp_new - np.sum(net.log_std()) - 3 * np.log(2 * np.pi) + rng.normal(0, 0.15, n)
    return Batch(obs, pre, logp, rng.normal(size=n), rng.normal(size=n))


def relative_error(a, b):
    return np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))


def test_loss_gradient_matches_finite_differences():
    net = PolicyNet.init(1, hidden=16)
    net.params["Wmu"] *= 50.0
    batch = frozen_batch(net)
    _, grads, _ = ppo_loss_and_grad(net, batch, 0.2, 0.5, 0.01)
    flat = net.flat()
    analytic = np.concatenate([grads[k].ravel() for k in net.params])
    rng = np.random.default_rng(2)
    idx = rng.choice(flat.size, 60, replace=False)
    h = 1e-6
    errs = []
    for i in idx:
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        net.set_flat(up)
        lu = ppo_loss_and_grad(net, batch, 0.2, 0.5, 0.01)[0]
        net.set_flat(dn)
        ld = ppo_loss_and_grad(net, batch, 0.2, 0.5, 0.01)[0]
        fd = (lu - ld) / (2 * h)
        if abs(fd) + abs(analytic[i]) > 1e-7:
            errs.append(relative_error(analytic[i], fd))
    net.set_flat(flat)
    assert errs and max(errs) < 1e-4


def test_saliency_sign_agrees_with_finite_differences():
    net = PolicyNet.init(3, hidden=32)
    net.params["Wmu"] *= 80.0
    rng = np.random.default_rng(4)
    agree = total = 0
    for _ in range(5):
        obs = rng.normal(size=45)
        grad = input_gradient(net, obs)
        for i in range(45):
            e = np.zeros(45)
            e[i] = 1e-6
            fd = (action_norm(net, obs + e) - action_norm(net, obs - e)) / 2e-6
            if abs(fd) < 1e-8:
                continue
            total += 1
            agree += np.sign(fd) == np.sign(grad[i])
    assert total > 100 and agree / total >= 0.95


def test_saliency_shapes():
    net = PolicyNet.init(0)
    per_slot, per_step = saliency(net, np.ones(45))
    assert per_slot.shape == (45,) and per_step.shape == (5,)
    np.testing.assert_allclose(per_step.sum(), per_slot.sum())


def test_checkpoint_round_trip(tmp_path):
    net = PolicyNet.init(5, mode="naive", config_hash="abc")
    net.save(tmp_path / "p.bin")
    back = PolicyNet.load(tmp_path / "p.bin")
    assert back.mode == "naive" and back.config_hash == "abc"
    np.testing.assert_allclose(back.flat(), net.flat().astype(np.float32))
    assert back.to_bytes() == PolicyNet.from_bytes(back.to_bytes()).to_bytes()


@pytest.mark.parametrize("blob", [b"nope", b"ADQNET01\x02\x00\x00\x00{}"])
def test_bad_checkpoints(blob):
    with pytest.raises((ConfigurationError, KeyError)):
        PolicyNet.from_bytes(blob)


def test_init_is_seeded():
    assert np.array_equal(PolicyNet.init(7).flat(), PolicyNet.init(7).flat())
    assert not np.array_equal(PolicyNet.init(7).flat(), PolicyNet.init(8).flat())


def test_act_bounds_and_determinism():
    net = PolicyNet.init(0)
    obs = np.random.default_rng(0).normal(size=45)
    a1 = act(net, obs, np.random.default_rng(1))
    a2 = act(net, obs, np.random.default_rng(1))
    assert np.array_equal(a1[1], a2[1])
    assert np.all(np.abs(a1[0].as_array()) <= 1.0)
    det = act(net, obs, deterministic=True)
    np.testing.assert_allclose(det[0].as_array(), np.tanh(net.forward(obs)[0][0]))
    with pytest.raises(ContractViolation):
        act(net, np.full(45, np.nan), deterministic=True)
    with pytest.raises(ContractViolation):
        act(net, obs)


def test_gae_matches_hand_computation():
    adv, ret = gae([1.0, 2.0], [0.5, 0.25], [False, True], 9.0, 0.9, 0.8)
    d1 = 2.0 - 0.25
    d0 = 1.0 + 0.9 * 0.25 - 0.5
    np.testing.assert_allclose(adv, [d0 + 0.9 * 0.8 * d1, d1])
    np.testing.assert_allclose(ret, adv + np.array([0.5, 0.25]))


def test_adam_decreases_quadratic():
    params = {"x": np.array([3.0, -2.0])}
    opt = Adam(params, 0.1)
    for _ in range(300):
        opt.step(params, {"x": 2 * params["x"]})
    assert np.linalg.norm(params["x"]) < 0.05


def test_baselines():
    rb = RandomBaseline()
    rb.reset(np.random.default_rng(0))
    a = rb(np.zeros(45), {})
    assert np.linalg.norm(a[:3]) == pytest.approx(1.0) and np.all(a[3:] == 0)
    ob = OppositeBaseline()
    out = ob(np.zeros(45), {"pin": np.zeros(3), "pull": np.array([0, 0, 2.0])})
    assert out.tolist() == [0, 0, 1.0, 0, 0, 0]
    assert isinstance(scripted_baseline("random"), RandomBaseline)
    with pytest.raises(ConfigurationError):
        scripted_baseline("oracle")


def test_hyper_validation():
    with pytest.raises(ConfigurationError):
        TrainHyper(iterations=-1)
    with pytest.raises(ConfigurationError):
        TrainHyper(reward_scale=0.0)


def test_zero_iterations_returns_initial_net():
    cfg = preset("nominal")
    net, reports = train(cfg, TrainHyper(iterations=0), 3)
    assert reports == []
    assert np.array_equal(net.flat(), PolicyNet.init(3).flat())


def test_training_is_reproducible_and_worker_independent():
    cfg = preset("nominal")
    hyper = TrainHyper(iterations=1, steps_per_iter=24, minibatch=8, epochs=2)
    a, ra = train(cfg, hyper, 5)
    b, rb = train(cfg, hyper, 5)
    c, rc = train(cfg, TrainHyper(iterations=1, steps_per_iter=24, minibatch=8, epochs=2, workers=2), 5)
    assert np.array_equal(a.flat(), b.flat())
    assert np.array_equal(a.flat(), c.flat())
    assert ra[0].steps == rc[0].steps >= 24


def test_collect_reaches_target():
    net = PolicyNet.init(0)
    eps = collect(net, preset("nominal"), 0, 10)
    assert sum(len(e["reward"]) for e in eps) >= 10


def test_net_policy_handle():
    pol = NetPolicy(PolicyNet.init(0))
    pol.reset(None)
    assert pol(np.zeros(45), {}).shape == (6,)
