import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nlbellman.hamiltonian import (
    Control,
    ControlProblem,
    ExteriorDatum,
    H,
    H_envelopes,
    argmax_control,
    exterior_from_config,
)

val = st.floats(-5.0, 5.0, allow_nan=False)


def _two_d():
    ctl = [
        Control(np.eye(2), [0.2, 0.0], [1.0], "expand"),
        Control(-np.eye(2), [0.0, 0.0], [1.5, 0.0, 0.0, 0.5], "contract"),
        Control(np.zeros((2, 2)), [0.0, 1.0], [0.0, 1.0, -1.0], "up"),
    ]
    return ControlProblem(ctl, 1.0, ExteriorDatum.constant(0.0, 2), 2)


@settings(max_examples=60, deadline=None)
@given(val, val, val, val)
def test_H_is_pointwise_max_of_affine_forms(x0, x1, p0, p1):
    prob = _two_d()
    x, p = np.array([x0, x1]), np.array([p0, p1])
    forms = [-(c.drift(x[None])[0] @ p) - c.cost(x[None])[0] for c in prob.controls]
    assert H(prob, x, p) == pytest.approx(max(forms), abs=1e-12)
    assert argmax_control(prob, x, p) == int(np.argmax(forms))


@settings(max_examples=60, deadline=None)
@given(val, val, val, val, val, val, st.floats(0.0, 1.0))
def test_H_convex_in_p(x0, x1, p0, p1, q0, q1, t):
    prob = _two_d()
    x = np.array([x0, x1])
    p, q = np.array([p0, p1]), np.array([q0, q1])
    lhs = H(prob, x, t * p + (1 - t) * q)
    rhs = t * H(prob, x, p) + (1 - t) * H(prob, x, q)
    assert lhs <= rhs + 1e-9 * (1 + abs(rhs))


@settings(max_examples=60, deadline=None)
@given(val, val, val, val, val, val)
def test_H_lipschitz_in_p(x0, x1, p0, p1, q0, q1):
    prob = _two_d()
    x = np.array([x0, x1])
    p, q = np.array([p0, p1]), np.array([q0, q1])
    bmax = np.max(np.linalg.norm(prob.drifts(x[None])[:, 0, :], axis=1))
    assert abs(H(prob, x, p) - H(prob, x, q)) <= bmax * np.linalg.norm(p - q) + 1e-9


@settings(max_examples=60, deadline=None)
@given(val, val, val, val)
def test_envelopes_bracket_every_control(x0, x1, p0, p1):
    prob = _two_d()
    x, p = np.array([x0, x1]), np.array([p0, p1])
    hi, hs = H_envelopes(prob, x, p)
    for c in prob.controls:
        v = -(c.drift(x[None])[0] @ p)
        assert hi - 1e-12 <= v <= hs + 1e-12


def test_argmax_tie_keeps_lowest_index():
    ctl = [Control(np.zeros((1, 1)), [1.0], [0.0]), Control(np.zeros((1, 1)), [1.0], [0.0])]
    prob = ControlProblem(ctl, 1.0, ExteriorDatum.constant(0.0), 1)
    assert argmax_control(prob, 0.3, 2.0) == 0


def test_vectorised_evaluation_matches_pointwise():
    prob = _two_d()
    rng = np.random.default_rng(3)
    x = rng.normal(size=(20, 2))
    p = rng.normal(size=(20, 2))
    vec = H(prob, x, p)
    assert np.allclose(vec, [H(prob, x[i], p[i]) for i in range(20)])


def test_problem_validation_and_derived_problems():
    with pytest.raises(ValueError):
        ControlProblem([], 1.0, ExteriorDatum.constant(0.0), 1)
    with pytest.raises(ValueError):
        ControlProblem([Control(np.zeros((1, 1)), [0.0])], -1.0, ExteriorDatum.constant(0.0), 1)
    prob = _two_d()
    assert prob.labels == ["expand", "contract", "up"]
    assert prob.L == pytest.approx(1.0)
    one = prob.restrict(1)
    assert one.m == 1 and one.labels == ["contract"]
    cheap = prob.with_costs([[0.0]] * 3)
    assert np.all(cheap.costs(np.zeros((4, 2))) == 0)


def test_exterior_data_builtins():
    tab = ExteriorDatum.table([0.0, 1.0], [1.0, 0.0])
    assert np.allclose(tab(np.array([-1.0, 0.25, 2.0])), [1.0, 0.75, 0.0])
    assert tab.sup == pytest.approx(1.0)
    cos = exterior_from_config({"kind": "cosine", "amplitude": 0.5, "freq": 3.0}, 2)
    pts = np.array([[0.0, 0.0], [np.pi / 3, 1.0]])
    assert np.allclose(cos(pts), [0.5, -0.5])
    shifted = tab.scaled(2.0, shift=1.0)
    assert np.allclose(shifted(np.array([0.25])), 2.0 * 0.75 + 1.0)
