import numpy as np
import pytest

from adqsim.errors import ConfigurationError, ContractViolation
from adqsim.geometry import make_knot
from adqsim.physics import PhysicsParams, SimState, detect_contacts, execute_pull, settle, vertex_masses


@pytest.fixture(scope="module")
def settled():
    params = PhysicsParams()
    chain = make_knot("loose_overhand", 48, 0.94, 5).with_grasps(1, 26)
    return settle(SimState.at_rest(chain, params), params, 400), params


def test_params_validation():
    with pytest.raises(ConfigurationError):
        PhysicsParams(substeps_per_pull=1)
    with pytest.raises(ConfigurationError):
        PhysicsParams(max_vertex_step=0.0)
    with pytest.raises(ConfigurationError):
        PhysicsParams.from_dict({"warp_drive": 1})


def test_params_round_trip():
    p = PhysicsParams(solver_iterations=12)
    assert PhysicsParams.from_dict(p.to_dict()) == p


def test_vertex_masses_sum_to_chain_mass():
    chain = make_knot("loose_overhand", 48, 0.94, 0)
    assert vertex_masses(chain, 0.356).sum() == pytest.approx(0.356 * chain.total_length)


def test_contacts_skip_neighbours():
    chain = make_knot("loose_overhand", 48, 0.94, 0)
    pairs = detect_contacts(chain, 0.005, 2)
    assert pairs and all(j - i > 2 for i, j in pairs)


def test_settle_keeps_edges_and_pin(settled):
    state, _ = settled
    chain = state.chain
    rel = np.abs(chain.edge_lengths() / chain.rest_length - 1.0)
    assert rel.max() < 0.02
    start = make_knot("loose_overhand", 48, 0.94, 5)
    assert np.linalg.norm(chain.vertices[1] - start.vertices[1]) < 1e-9


def test_pull_trace_has_k_plus_one_samples(settled):
    state, params = settled
    frames = []
    out, trace = execute_pull(state, params, np.array([0.0, 0.0, 1.0]), 0.03, 30.0, frames.append)
    assert trace.samples.shape == (params.substeps_per_pull + 1, 3)
    assert len(frames) == params.substeps_per_pull
    assert [f["substep"] for f in frames] == list(range(1, params.substeps_per_pull + 1))
    assert np.all(np.linalg.norm(trace.samples, axis=1) <= 30.0 + 1e-9)
    moved = out.pull_target - state.pull_target
    assert np.linalg.norm(moved) <= 0.03 + 1e-12


def test_pull_is_deterministic(settled):
    state, params = settled
    u = np.array([0.3, -0.6, 0.7])
    a, ta = execute_pull(state, params, u, 0.03, 30.0)
    b, tb = execute_pull(state, params, u, 0.03, 30.0)
    assert np.array_equal(a.chain.vertices, b.chain.vertices)
    assert np.array_equal(ta.samples, tb.samples)


def test_pull_does_not_mutate_input(settled):
    state, params = settled
    before = state.chain.vertices.copy()
    execute_pull(state, params, np.array([1.0, 0.0, 0.0]), 0.03, 30.0)
    assert np.array_equal(state.chain.vertices, before)


def test_force_limit_saturates(settled):
    state, params = settled
    _, trace = execute_pull(state, params, np.array([0.0, 1.0, 0.0]), 0.3, 2.0)
    assert np.linalg.norm(trace.samples, axis=1).max() <= 2.0 + 1e-9


@pytest.mark.parametrize("u", [np.array([2.0, 0, 0]), np.array([np.nan, 0, 0]), np.zeros(2)])
def test_bad_direction_rejected(settled, u):
    state, params = settled
    with pytest.raises(ContractViolation):
        execute_pull(state, params, u, 0.03, 30.0)


def test_hanging_chain_weight_is_reported():
    params = PhysicsParams()
    n = 12
    verts = np.stack((np.zeros(n), np.zeros(n), -np.linspace(0, 0.22, n)), axis=1)
    from adqsim.geometry import CapsuleChain

    chain = CapsuleChain(verts, 0.005, 0.02, n - 1, 0)
    state = settle(SimState.at_rest(chain, params), params, 400)
    weight = vertex_masses(chain, params.linear_density).sum() * 9.81
    # both grasps share the weight of a vertical chain
    assert -weight <= state.force[2] < -0.25 * weight
    assert abs(state.force[0]) < 1e-6 and abs(state.force[1]) < 1e-6


def test_saturate_never_exceeds_limit():
    from adqsim.physics import _saturate

    rng = np.random.default_rng(0)
    forces = rng.normal(0, 40.0, (20_000, 3))
    out = np.array([_saturate(f, 30.0) for f in forces])
    assert np.all(np.linalg.norm(out, axis=1) <= 30.0)
    assert all(np.linalg.norm(f) <= 30.0 for f in out)
