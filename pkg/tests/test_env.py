import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adqsim.config import SimConfig, preset
from adqsim.env import (
    Env,
    StepAction,
    entangling_pairs,
    perturb_direction,
    reset,
    reward_terms,
    run_episode,
    sample_episode,
    sensor_reading,
    step,
    substream,
)
from adqsim.errors import ContractViolation
from adqsim.geometry import CapsuleChain
from adqsim.policy import OppositeBaseline, RandomBaseline


@pytest.fixture(scope="module")
def cfg():
    return preset("nominal")


@pytest.fixture(scope="module")
def start(cfg):
    return reset(cfg, 11)


def test_reward_example(cfg):
    r, terms = reward_terms(cfg, 0.04, 1.2, False)
    assert r == pytest.approx(-0.08)
    assert terms == pytest.approx({"length": 0.04, "writhe": -0.12, "success": 0.0})


def test_reward_success_bonus(cfg):
    r, _ = reward_terms(cfg, 0.0, 0.0, True)
    assert r == pytest.approx(10.0)


def test_action_validation():
    with pytest.raises(ContractViolation):
        StepAction([1.5, 0, 0], [0, 0, 0])
    with pytest.raises(ContractViolation):
        StepAction.from_array(np.zeros(5))
    a = StepAction.from_array([0.1, 0.2, 0.3, -1, 0, 1])
    assert a.as_array().tolist() == [0.1, 0.2, 0.3, -1, 0, 1]


def test_substreams_are_independent_and_reproducible():
    a = substream(0, 5, 1).random(4)
    assert np.array_equal(a, substream(0, 5, 1).random(4))
    assert not np.array_equal(a, substream(0, 5, 2).random(4))
    assert not np.array_equal(a, substream(0, 6, 1).random(4))
    assert not np.array_equal(a, substream(1, 5, 1).random(4))


def test_sample_episode_respects_ranges(cfg):
    r = cfg.randomization
    for seed in range(30):
        ep = sample_episode(cfg, seed)
        assert r.force_scale[0] <= ep.force_scale <= r.force_scale[1]
        assert all(r.force_bias[0] <= b <= r.force_bias[1] for b in ep.force_bias)
        assert r.pull_multiplier[0] <= ep.pull_multiplier <= r.pull_multiplier[1]
        assert r.linear_density[0] <= ep.linear_density <= r.linear_density[1]
        assert {ep.pin_index, ep.pull_index} <= set(cfg.pin_candidates) | set(cfg.pull_candidates)
        assert 0 <= ep.knot_seed < cfg.knot_pool
    assert sample_episode(cfg, 3) == sample_episode(cfg, 3)


def test_sensor_models(cfg):
    f = np.ones((4, 3))
    ep = sample_episode(cfg, 0)
    out = sensor_reading(cfg, ep, f, np.random.default_rng(0))
    np.testing.assert_allclose(out, ep.force_scale * f + np.array(ep.force_bias))
    g = preset("shifted")
    noisy = sensor_reading(g, ep, f, np.random.default_rng(0))
    assert noisy.shape == f.shape and not np.allclose(noisy, ep.force_scale * f)
    off = SimConfig(sensor_randomization=False)
    assert np.array_equal(sensor_reading(off, ep, f, None), f)


@given(st.integers(0, 10_000))
def test_perturb_direction_angle_bound(seed):
    z = np.array([0.0, 0.6, 0.8])
    out = perturb_direction(z, np.random.default_rng(seed), 5.0)
    assert np.linalg.norm(out) == pytest.approx(1.0)
    assert np.degrees(np.arccos(np.clip(out @ z, -1, 1))) <= 5.0 + 1e-6


def test_entangling_pairs_split_at_grasp():
    verts = np.stack((np.arange(10.0), np.zeros(10), np.zeros(10)), axis=1)
    chain = CapsuleChain(verts, 0.1, 1.0, 9, 4)
    assert entangling_pairs(chain, [(0, 3), (1, 6), (3, 4), (5, 8)]) == [(1, 6), (3, 4)]


def test_reset_observation(cfg, start):
    state, obs = start
    assert obs.shape == (45,)
    assert np.all(obs[:36] == 0.0)
    assert obs[36:39].tolist() == [0.0, 0.0, 0.0]
    assert np.linalg.norm(obs[42:45]) == pytest.approx(1.0)
    assert state.t == 0 and not state.done
    np.testing.assert_allclose(state.thresholds.tau, cfg.tau_init)


def test_reset_is_deterministic(cfg):
    a, oa = reset(cfg, 2)
    b, ob = reset(cfg, 2)
    assert np.array_equal(oa, ob)
    assert a.sim.chain == b.sim.chain


def test_step_is_functional_and_replayable(start):
    state, _ = start
    action = StepAction([0.2, -0.4, 0.9], [0.5, -0.5, 1.0])
    before = state.sim.chain.vertices.copy()
    s1, o1, r1, d1, i1 = step(state, action)
    s2, o2, r2, d2, i2 = step(state, action)
    assert np.array_equal(state.sim.chain.vertices, before)
    assert np.array_equal(o1, o2) and r1 == r2 and d1 == d2
    assert np.array_equal(s1.sim.chain.vertices, s2.sim.chain.vertices)
    assert s1.t == 1


def test_step_threshold_order(cfg, start):
    state, _ = start
    s1, obs, _, _, info = step(state, StepAction([0, 0, 1.0], [1.0, 0.0, -1.0]))
    np.testing.assert_allclose(info["tau"], cfg.tau_init + cfg.delta_max * np.array([1.0, 0.0, -1.0]))
    np.testing.assert_allclose(obs[39:42], [0.1, 0.0, -0.1])
    q = np.where(info["delta_f"] > info["tau"], 1, np.where(info["delta_f"] < -info["tau"], -1, 0))
    assert obs[36:39].tolist() == q.tolist()


def test_fixed_mode_ignores_threshold_action():
    cfg = preset("nominal", obs_mode="adq_fixed_tau")
    state, _ = reset(cfg, 11)
    _, obs, _, _, info = step(state, StepAction([0, 0, 1.0], [1.0, 1.0, 1.0]))
    np.testing.assert_allclose(info["tau"], cfg.fixed_tau)
    assert obs[39:42].tolist() == [0.0, 0.0, 0.0]


def test_reward_decomposition(start):
    state, _ = start
    _, _, r, _, info = step(state, StepAction([0, 1.0, 0], [0, 0, 0]))
    assert r == pytest.approx(sum(info["reward_terms"].values()), abs=1e-12)
    assert info["delta_ell"] == pytest.approx(info["ell"] - state.ell)


def test_step_after_done_raises(cfg):
    rec_state, _ = reset(cfg, 4)
    state = rec_state
    while not state.done:
        state, *_ = step(state, StepAction([0, 0, 1.0], [0, 0, 0]))
    with pytest.raises(ContractViolation):
        step(state, StepAction([0, 0, 1.0], [0, 0, 0]))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_episode_record_invariants(cfg, seed):
    rec = run_episode(RandomBaseline(), cfg, seed)
    assert 1 <= rec.n_steps <= cfg.horizon
    if rec.success:
        assert rec.steps[-1].ell <= reset(cfg, seed)[0].epsilon
    assert rec.peak_force <= cfg.force_limit + 1e-9
    assert rec.writhe_reduction == pytest.approx(rec.writhe_final - rec.writhe_initial)
    for s in rec.steps:
        assert s.reward == pytest.approx(sum(s.reward_terms.values()), abs=1e-12)


def test_run_episode_is_deterministic(cfg):
    a = run_episode(OppositeBaseline(), cfg, 9)
    b = run_episode(OppositeBaseline(), cfg, 9)
    assert a.to_jsonl() == b.to_jsonl()


def test_jsonl_schema(cfg):
    rec = run_episode(OppositeBaseline(), cfg, 1, record_frames=True)
    lines = [json.loads(x) for x in rec.to_jsonl().splitlines()]
    assert all(doc["schema"] == 1 for doc in lines)
    types = [doc["type"] for doc in lines]
    assert types[-1] == "summary"
    assert types.count("step") == rec.n_steps
    assert types.count("frame") == rec.n_steps * cfg.physics.substeps_per_pull


def test_env_wrapper(cfg):
    env = Env(cfg)
    with pytest.raises(ContractViolation):
        env.step(np.zeros(6))
    obs = env.reset(0)
    obs2, r, done, info = env.step(np.array([0, 0, 1.0, 0, 0, 0]))
    assert obs.shape == obs2.shape == (45,)
    assert info["t"] == 1
