import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adqsim.errors import ConfigurationError, InvalidGeometryError
from adqsim.geometry import (
    KNOT_KINDS,
    CapsuleChain,
    free_end_length,
    make_knot,
    mirror,
    pull_side_tip,
    rotate_z,
    writhe,
)
from oracles import gauss_writhe_quadrature, trefoil_polyline

coords = st.floats(-1, 1, allow_nan=False)


def straight_chain(n=10, pin=0, pull=9):
    verts = np.stack((np.linspace(0, 0.9, n), np.zeros(n), np.zeros(n)), axis=1)
    return CapsuleChain(verts, 0.01, 0.1, pin, pull)


def test_trefoil_matches_quadrature():
    p = trefoil_polyline()
    exact = writhe(p)
    ref = gauss_writhe_quadrature(p)
    assert abs(exact - ref) <= 0.02 * abs(ref)
    assert abs(exact) > 1.0


def test_writhe_of_straight_line_is_zero():
    assert writhe(straight_chain()) == 0.0


@given(arrays(np.float64, st.tuples(st.integers(4, 20), st.just(2)), elements=coords))
def test_planar_curves_have_zero_writhe(xy):
    pts = np.column_stack((xy, np.zeros(len(xy))))
    assert abs(writhe(pts)) < 1e-9


@given(arrays(np.float64, st.tuples(st.integers(4, 16), st.just(3)), elements=coords))
def test_mirror_flips_writhe(p):
    q = p.copy()
    q[:, 2] *= -1
    assert abs(writhe(q) + writhe(p)) < 1e-9


@given(
    arrays(np.float64, st.tuples(st.integers(4, 12), st.just(3)), elements=coords),
    st.floats(0, 2 * np.pi),
    arrays(np.float64, 3, elements=coords),
)
def test_writhe_rigid_invariance(p, angle, shift):
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    assert abs(writhe(p @ rot.T + shift) - writhe(p)) < 1e-9


def test_reversed_orientation_keeps_writhe():
    p = trefoil_polyline()
    assert abs(writhe(p[::-1]) - writhe(p)) < 1e-9


def test_free_end_length_examples():
    chain = straight_chain(pull=8)
    assert pull_side_tip(chain) == 9
    assert free_end_length(chain, []) == 0.0
    # touched vertices run up to 6, so three edges remain free
    assert free_end_length(chain, [(2, 5)]) == pytest.approx(0.3)
    chain = straight_chain(pin=8, pull=1)
    assert pull_side_tip(chain) == 0
    assert free_end_length(chain, [(3, 6)]) == pytest.approx(0.3)


@given(st.integers(0, 4), st.integers(0, 4))
def test_free_end_length_monotone_in_contact_index(a, b):
    chain = straight_chain(pin=8, pull=1)
    la = free_end_length(chain, [(a, a + 3)])
    lb = free_end_length(chain, [(b, b + 3)])
    if a <= b:
        assert la <= lb


@pytest.mark.parametrize("kind", KNOT_KINDS)
def test_make_knot_invariants(kind):
    n = 48 if "overhand" in kind else 64
    chain = make_knot(kind, n, 0.94, seed=3)
    assert chain.n_vertices == n
    assert chain.total_length == pytest.approx(0.94, rel=0.02)
    np.testing.assert_allclose(chain.edge_lengths(), chain.rest_length, rtol=1e-6)
    assert writhe(chain) > 0.5


def test_make_knot_is_deterministic():
    assert make_knot("loose_overhand", 48, 0.94, 7) == make_knot("loose_overhand", 48, 0.94, 7)


def test_double_knot_has_more_writhe():
    assert writhe(make_knot("loose_double", 64, 0.94, 0)) > writhe(make_knot("loose_overhand", 64, 0.94, 0))


@pytest.mark.parametrize("args", [("granny", 48, 0.9, 0), ("loose_overhand", 10, 0.9, 0), ("loose_double", 48, 0.0, 0)])
def test_make_knot_rejects_bad_arguments(args):
    with pytest.raises(ConfigurationError):
        make_knot(*args)


def test_chain_validation():
    with pytest.raises(InvalidGeometryError):
        CapsuleChain(np.zeros((5, 3)), 0.01, 0.1, 0, 4)
    with pytest.raises(InvalidGeometryError):
        straight_chain(pin=3, pull=3)
    with pytest.raises(InvalidGeometryError):
        CapsuleChain(np.zeros((10, 3)), -1.0, 0.1, 0, 9)


def test_chain_json_round_trip():
    chain = make_knot("tight_overhand", 40, 0.8, 1)
    assert CapsuleChain.from_json(chain.to_json()) == chain


def test_rotate_and_mirror():
    chain = make_knot("loose_overhand", 48, 0.94, 2)
    assert writhe(rotate_z(chain, 1.1)) == pytest.approx(writhe(chain), abs=1e-9)
    assert writhe(mirror(chain)) == pytest.approx(-writhe(chain), abs=1e-9)
