import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import scheme_for, setup_for, solve_for
from nlbellman.geometry import ConeSpec, classify_boundary
from nlbellman.grid import Grid, GridFunction
from nlbellman.hamiltonian import ExteriorDatum
from nlbellman.kernel import LevyKernel, theta0
from nlbellman.verify import (
    FitError,
    PreconditionError,
    TransformedField,
    aitken_limit,
    boundary_report,
    comparison_experiment,
    cone_extrapolate,
    gamma_in_band,
    grid_cone,
    phi_extension,
    quadratic_fit,
    slack,
    transform_amplitude,
    viscosity_residual,
    viscosity_residuals,
)


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10), st.floats(-5, 5).filter(lambda c: abs(c) > 1e-3), st.floats(0.1, 0.9))
def test_aitken_exact_on_geometric_sequences(L, c, r):
    vals = L + c * r ** np.arange(5)
    lim, unc = aitken_limit(vals)
    assert lim == pytest.approx(L, abs=1e-8 * (1 + abs(c)))
    assert unc < 1e-8 * (1 + abs(c))


def test_aitken_falls_back_on_oscillation():
    lim, unc = aitken_limit([1.0, 2.0, 1.0, 2.0])
    assert lim == 2.0 and unc == 1.0
    with pytest.raises(ValueError):
        aitken_limit([1.0, 2.0])


def test_quadratic_fit_exact_on_quadratics():
    g1 = Grid(setup_for("outward-1d")[1].domain, n=63)
    x = g1.nodes[:, 0]
    m = quadratic_fit(GridFunction(g1, 3 - 2 * x + 5 * x**2), 20)
    x0 = x[20]
    assert m.grad[0] == pytest.approx(-2 + 10 * x0)
    assert m.hess[0, 0] == pytest.approx(10.0)
    g2 = Grid(setup_for("mixed-disk")[1].domain, h=0.125)
    p = g2.nodes
    vals = 1 + p[:, 0] - 2 * p[:, 1] + p[:, 0] ** 2 + 3 * p[:, 0] * p[:, 1]
    i = int(np.argmin(np.linalg.norm(p, axis=1)))
    m = quadratic_fit(GridFunction(g2, vals), i)
    assert np.allclose(m.hess, [[2.0, 3.0], [3.0, 0.0]])
    with pytest.raises(FitError):
        quadratic_fit(GridFunction(g1, x), 0)


def test_viscosity_residual_vanishes_for_exact_constant():
    _, s = setup_for("constant")
    res = solve_for("constant")
    idx, vals = viscosity_residuals(res.values, s.domain, s.kernel, s.problem)
    assert len(idx) > 100
    assert np.max(np.abs(vals)) < 1e-9


def test_viscosity_residuals_decay_on_compact_subset():
    sups = []
    for n in (127, 255, 511):
        over = (f"grid.n={n}",)
        _, s = setup_for("inward-1d", over)
        u = solve_for("inward-1d", over).values
        deep = np.flatnonzero(u.grid.distance >= 0.1)
        sups.append(max(abs(viscosity_residual(u, s.domain, s.kernel, s.problem, i)) for i in deep[::4]))
    assert sups[1] < 0.6 * sups[0] and sups[2] < 0.6 * sups[1]
    assert sups[2] <= slack(1 / 512, 0.5)


def test_slack_scaling():
    assert slack(0.25, 0.5) == pytest.approx(0.5)
    assert slack(0.25, 0.5, 3.0) == pytest.approx(1.5)


def test_phi_extension_inside_outside_boundary():
    _, s = setup_for("inward-1d", ("grid.n=63",))
    g = Grid(s.domain, n=63)
    u = GridFunction(g, np.full(len(g), 0.25), s.problem.phi)
    vals = phi_extension(u, np.array([0.5, -0.5, 0.0, 0.0]))
    assert np.allclose(vals[:2], [0.25, 1.0])
    assert phi_extension(u, np.array([0.0]), "upper")[0] == 1.0
    assert phi_extension(u, np.array([0.0]), "lower")[0] == 0.25


def test_cone_extrapolation_of_smooth_function():
    _, s = setup_for("mixed-disk")
    f = lambda p: np.cos(p[:, 0]) + p[:, 1]  # noqa: E731
    lim, unc = cone_extrapolate(f, ConeSpec([1.0, 0.0], t0=0.2), 6, s.domain)
    # Aitken removes the O(t) term; what is left is O(t^2) at the innermost point
    t_last = 0.2 * 0.5**5
    raw = np.cos(1.0 - t_last)
    assert abs(lim - np.cos(1.0)) < 2 * t_last**2
    assert abs(lim - np.cos(1.0)) < 0.01 * abs(raw - np.cos(1.0))


def test_grid_cone_keeps_inner_point_off_boundary():
    u = solve_for("outward-1d").values
    spec = grid_cone(u, [0.0], t_min_h=8, levels=5)
    assert spec.t0 * 0.5**4 == pytest.approx(8 * u.grid.h)


def test_outward_boundary_attained():
    _, s = setup_for("outward-1d")
    u = solve_for("outward-1d", refine=1).values
    cls = classify_boundary(s.domain, s.problem)
    rep = boundary_report(u, s.domain, cls, s.problem)
    assert rep.labels == ["Out", "Out"]
    assert rep.all_passed and rep.max_gap("Out") < 1e-2


def test_comparison_experiment_counts_and_precondition():
    sc = scheme_for("inward-1d", ("grid.n=255",))
    phi1 = ExteriorDatum.table([0.0, 1.0], [1.0, 0.0])
    phi2 = phi1.scaled(1.0, shift=0.5)
    rep = comparison_experiment(sc, phi1, phi2)
    assert rep.passed and rep.min_difference >= 0
    with pytest.raises(PreconditionError):
        comparison_experiment(sc, phi2, phi1)


def test_transformed_fields():
    kernel = LevyKernel(0.5)
    g = Grid(setup_for("outward-1d")[1].domain, n=63)
    u = GridFunction(g, np.sin(g.nodes[:, 0]))
    A = 0.7
    w = TransformedField(u, A, "W", other=u).nodal(0.5)
    assert np.allclose(w, 2 * A * g.distance**0.5)
    assert np.allclose(TransformedField(u, 0.0, "W", other=u).nodal(0.5), 0.0)
    assert np.allclose(TransformedField(u, A, "V").nodal(0.5), u.values - A * g.distance**0.5)
    assert transform_amplitude(kernel, 1.0, 2.0, 4.0) == pytest.approx(2 * theta0(kernel) * 3.0 / 4.0)
    with pytest.raises(ValueError):
        TransformedField(u, A, "W")


def test_gamma_in_band():
    _, s = setup_for("inward-1d", ("grid.n=63",))
    g = Grid(s.domain, n=63)
    cls = classify_boundary(s.domain, s.problem)
    band = gamma_in_band(g, cls, 0.1)
    assert np.all(g.nodes[band, 0] < 0.1)
    assert len(band) == np.sum(g.nodes[:, 0] < 0.1)
