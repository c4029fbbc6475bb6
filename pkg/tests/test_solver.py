import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import scheme_for, solve_for
from nlbellman.config import build, load_config
from nlbellman.hamiltonian import ExteriorDatum
from nlbellman.solver import (
    ConvergenceError,
    assemble,
    penalty_obstacles,
    perron_sweep,
    policy_iteration,
    refinement_gap,
    solve_penalized,
    value_iteration,
)


def _interval_cfg(controls, n, kernel=None, phi=None, lam=1.0):
    cfg = {"domain": {"kind": "interval", "params": {"a": 0.0, "b": 1.0}}, "controls": controls,
           "grid": {"n": n}, "lam": lam}
    if kernel:
        cfg["kernel"] = kernel
    if phi is not None:
        cfg["phi"] = phi
    return load_config(cfg)


def _scheme(cfg):
    s = build(cfg)
    return assemble(s.domain, s.kernel, s.problem, s.grid(), s.quad)


def test_constant_solution_is_exact():
    res = solve_for("constant")
    assert res.converged
    assert np.max(np.abs(res.u - 1.0)) < 1e-12


def test_mmatrix_structure_and_row_balance(preset_name):
    sc = scheme_for(preset_name)
    for k in range(sc.m):
        A = sc.matrix(k)
        off = A - np.diag(np.diag(A))
        assert np.all(off <= 1e-14 * np.abs(A).max())
        assert np.all(np.diag(A) > 0)
        # strict diagonal dominance by lambda_bar once the ghost coupling is counted
        assert np.allclose(sc.row_balance(k), sc.lam_bar, rtol=1e-10, atol=1e-12)
        assert np.all(sc.lam_bar >= sc.mu0 - 1e-12)


def test_pure_transport_converges_first_order():
    # zero kernel, b = 1/2, f = 1: u = 1 - exp(2 (x - 1)), no condition needed at x = 0
    errs = []
    for n in (127, 255, 511):
        cfg = _interval_cfg([{"c": [0.5], "f": [1.0]}], n, kernel={"alpha": 0.5, "density": "zero"})
        sc = _scheme(cfg)
        x = sc.grid.nodes[:, 0]
        errs.append(np.max(np.abs(policy_iteration(sc).u - (1 - np.exp(2 * (x - 1))))))
    rates = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(rates - 1.0) < 0.05)


def test_policy_and_value_iteration_agree(preset_name):
    sc = scheme_for(preset_name)
    pi = solve_for(preset_name)
    vi = value_iteration(sc, tol=1e-9)
    assert pi.converged and vi.converged
    assert np.max(np.abs(pi.u - vi.u)) <= 10 * 1e-9
    assert pi.iterations <= 10


def test_a_priori_bound(preset_name):
    sc = scheme_for(preset_name)
    res = solve_for(preset_name)
    R = sc.problem.phi.sup + sc.f_sup / sc.mu0
    assert np.max(np.abs(res.u)) <= R + 10 * 1e-9
    assert res.bound_R == pytest.approx(R)


@settings(max_examples=15, deadline=None)
@given(st.floats(-1.0, 1.0), st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_discrete_comparison_ordered_data(a, b, gap):
    sc = scheme_for("switching-1d")
    phi1 = ExteriorDatum.table([0.0, 1.0], [a, a + b])
    phi2 = ExteriorDatum.table([0.0, 1.0], [a + gap, a + b + gap])
    u1 = policy_iteration(sc.with_phi(phi1)).u
    u2 = policy_iteration(sc.with_phi(phi2)).u
    assert np.all(u1 <= u2)
    # shifting phi by c moves u by at most c
    assert np.all(u2 - u1 <= gap + 1e-9)


def test_howard_is_slow_on_ridge_switch():
    # two opposing unit drifts: the optimal policy switches at a ridge of u in
    # the middle, and each Howard step moves the switch a bounded distance,
    # so the count grows with the grid size
    counts = []
    for n in (63, 255, 1023):
        cfg = _interval_cfg([{"c": [-1.0], "f": [1.0], "label": "left"},
                             {"c": [1.0], "f": [1.0], "label": "right"}], n)
        sc = _scheme(cfg)
        res = policy_iteration(sc)
        assert res.converged
        assert np.max(np.abs(res.u - value_iteration(sc).u)) < 1e-8
        counts.append(res.iterations)
    assert counts == sorted(counts) and counts[-1] > 10
    assert counts == [5, 8, 15]


def test_nonconvergence_raises_with_partial_result():
    cfg = _interval_cfg([{"c": [-1.0], "f": [1.0]}, {"c": [1.0], "f": [1.0]}], 255)
    with pytest.raises(ConvergenceError) as info:
        policy_iteration(_scheme(cfg), max_outer=2)
    assert info.value.result.iterations == 2 and not info.value.result.converged
    with pytest.raises(ConvergenceError):
        value_iteration(scheme_for("inward-1d"), tol=1e-12, max_iters=5)


def test_penalized_solutions_bounded_and_approach_direct():
    sc = scheme_for("outward-1d")
    direct = solve_for("outward-1d")
    prev = np.inf
    for eps in (1.0, 0.25, 2.0**-6):
        w = solve_penalized(sc, eps)
        assert w.converged
        lo, hi = penalty_obstacles(sc, eps)
        assert np.all(w.u >= lo - 1e-9) and np.all(w.u <= hi + 1e-9)
        gap = np.max(np.abs(w.u - direct.u))
        assert gap <= prev
        prev = gap


def test_perron_sweep_on_outward_preset():
    sc = scheme_for("outward-1d")
    rep = perron_sweep(sc, solve_for("outward-1d"), tol_disc=1e-3)
    assert all(rep.bounds_ok) and rep.monotone and rep.agreement_ok


def test_refinement_gap_shrinks():
    g1 = refinement_gap(solve_for("outward-1d", refine=-1), solve_for("outward-1d"))
    g2 = refinement_gap(solve_for("outward-1d"), solve_for("outward-1d", refine=1))
    assert 0 < g2 < g1
