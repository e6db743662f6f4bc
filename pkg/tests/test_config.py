import json

import pytest

from adqsim.config import Randomization, SimConfig, canonical_json, config_hash, preset
from adqsim.errors import ConfigurationError


def test_defaults_match_published_table():
    cfg = SimConfig()
    r = cfg.randomization
    assert r.force_scale == (0.95, 1.05)
    assert r.force_bias == (-0.6, 0.6)
    assert r.pull_multiplier == (0.05, 10.0)
    assert r.linear_density == (0.267, 0.445)
    assert r.joint_friction == (0.375, 0.625)
    assert r.joint_damping == (0.375, 0.625)
    assert r.surface_friction == (0.3, 0.5)
    assert (cfg.alpha, cfg.force_limit, cfg.horizon) == (0.03, 30.0, 15)


def test_json_round_trip_and_hash():
    cfg = preset("shifted", seed=4)
    back = SimConfig.from_json(cfg.to_json())
    assert back == cfg
    assert back.config_hash() == cfg.config_hash()


def test_hash_is_key_order_independent():
    doc = SimConfig().to_dict()
    reordered = dict(reversed(list(doc.items())))
    assert config_hash(doc) == config_hash(reordered)
    assert canonical_json(doc) == canonical_json(json.loads(json.dumps(reordered)))


def test_hash_changes_with_content():
    assert SimConfig().config_hash() != SimConfig(alpha=0.04).config_hash()


def test_unknown_fields_rejected():
    doc = SimConfig().to_dict()
    doc["bogus"] = 1
    with pytest.raises(ConfigurationError, match="bogus"):
        SimConfig.from_dict(doc)


@pytest.mark.parametrize(
    "changes",
    [
        {"alpha": 0.0},
        {"horizon": 0},
        {"obs_mode": "telepathy"},
        {"pin_candidates": (0,), "pull_candidates": (0,)},
        {"pull_candidates": (99,)},
        {"fixed_tau": 3.0},
        {"sensor_model": "laser"},
        {"knot_pool": -1},
    ],
)
def test_invalid_configs(changes):
    with pytest.raises(ConfigurationError):
        SimConfig(**changes)


def test_randomization_validation():
    with pytest.raises(ConfigurationError):
        Randomization(joint_friction=(0.7, 0.3))


def test_shifted_preset():
    nom, sh = preset("nominal"), preset("shifted")
    assert sh.physics.contact_stiffness == pytest.approx(0.5 * nom.physics.contact_stiffness)
    assert sh.physics.solver_iterations == 2 * nom.physics.solver_iterations
    assert sh.randomization.joint_friction == pytest.approx((0.475, 0.725))
    assert sh.randomization.surface_friction == pytest.approx((0.4, 0.6))
    assert sh.sensor_model == "gaussian" and sh.sensor_noise == 0.3
    with pytest.raises(ConfigurationError):
        preset("vacuum")


def test_with_mode():
    assert SimConfig().with_mode("naive").obs_mode == "naive"
    with pytest.raises(ValueError):
        SimConfig().with_mode("other")
