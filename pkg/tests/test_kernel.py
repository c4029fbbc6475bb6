import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad as scipy_quad
from scipy.special import gamma

from nlbellman.geometry import Disk, Interval
from nlbellman.grid import Grid, GridFunction
from nlbellman.hamiltonian import Control, ControlProblem, ExteriorDatum
from nlbellman.kernel import (
    LevyKernel,
    LocalModel,
    QuadratureSpec,
    apply_censored,
    apply_split,
    fractional_laplacian_constant,
    kernel_density,
    mu0_estimate,
    phi_bar,
    tail_mass,
    theta0,
)

ZERO = lambda p: np.zeros(len(p))  # noqa: E731


def _problem(phi, lam=1.0):
    return ControlProblem([Control(np.zeros((1, 1)), [0.0], [0.0])], lam, phi, 1)


@pytest.mark.parametrize("n", [1, 2])
@pytest.mark.parametrize("alpha", [0.2, 0.5, 0.9])
def test_fractional_laplacian_constant_alternative_form(n, alpha):
    # alpha 2^(alpha-1) Gamma((n+alpha)/2) / (pi^(n/2) Gamma(1-alpha/2))
    alt = alpha * 2 ** (alpha - 1) * gamma((n + alpha) / 2) / (np.pi ** (n / 2) * gamma(1 - alpha / 2))
    assert fractional_laplacian_constant(n, alpha) == pytest.approx(alt, rel=1e-13)


def _bump_model(x, s):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    w = 1.0 - x @ x
    grad = -2 * s * x * w ** (s - 1)
    hess = -2 * s * w ** (s - 1) * np.eye(len(x)) + 4 * s * (s - 1) * w ** (s - 2) * np.outer(x, x)
    return LocalModel(w**s, grad, hess)


@pytest.mark.parametrize("alpha", [0.3, 0.5, 0.8])
@pytest.mark.parametrize("x", [0.0, 0.3, 0.7])
def test_full_operator_on_bump_1d(alpha, x):
    # (-Delta)^s (1 - x^2)_+^s = 4^s Gamma(1+s) Gamma(1/2+s) / Gamma(1/2) on (-1, 1)
    s = alpha / 2
    ker = LevyKernel(alpha, 1, "fractional-laplacian")
    u = lambda p: np.maximum(1 - np.asarray(p)[:, 0] ** 2, 0) ** s  # noqa: E731
    ref = 4**s * gamma(1 + s) * gamma(0.5 + s) / gamma(0.5)
    q = QuadratureSpec(panels_per_decade=8, exit_levels=20)
    val = apply_split(u, ker, Interval(-1.0, 1.0), [x], 0.005, _bump_model([x], s), q, breaks=[-1, 1], exterior=ZERO)
    assert -val == pytest.approx(ref, rel=1e-7)


@pytest.mark.parametrize("x", [(0.0, 0.0), (0.3, 0.2), (-0.5, 0.4)])
def test_full_operator_on_bump_2d(x):
    # (-Delta)^s (1 - |x|^2)_+^s = 4^s Gamma(1+s)^2 on the unit disk
    s = 0.25
    ker = LevyKernel(0.5, 2, "fractional-laplacian")
    u = lambda p: np.maximum(1 - np.sum(np.asarray(p) ** 2, axis=1), 0) ** s  # noqa: E731
    q = QuadratureSpec(panels_per_decade=8, exit_levels=20)
    val = apply_split(u, ker, Disk((0.0, 0.0), 1.0), np.array(x), 0.005, _bump_model(x, s), q, exterior=ZERO)
    assert -val == pytest.approx(4**s * gamma(1 + s) ** 2, rel=1e-7)


def test_split_operator_on_capped_square():
    # u = min(y^2, 4) at x = 0.5 on (0, 1), K = 1, alpha = 1/2; reference by adaptive quadrature
    ker = LevyKernel(0.5)
    u = lambda p: np.minimum(np.asarray(p)[:, 0] ** 2, 4.0)  # noqa: E731
    g = lambda z: (min((0.5 + z) ** 2, 4) + min((0.5 - z) ** 2, 4) - 0.5) * z**-1.5  # noqa: E731
    ref = scipy_quad(lambda z: 2 * z * z * z**-1.5, 0, 1.5)[0] + scipy_quad(g, 1.5, 2.5)[0]
    ref += scipy_quad(g, 2.5, np.inf)[0]
    assert ref == pytest.approx(14.014329184690551, rel=1e-12)
    val = apply_split(u, ker, Interval(0.0, 1.0), [0.5], 0.25, LocalModel(0.25, [1.0], [[2.0]]),
                      QuadratureSpec(panels_per_decade=8), breaks=[-2, 2])
    assert val == pytest.approx(14.014329184690551, rel=2e-13)


def test_linear_function_has_zero_symmetric_operator():
    ker = LevyKernel(0.5)
    u = lambda p: np.asarray(p)[:, 0]  # noqa: E731
    val = apply_split(u, ker, Interval(0.0, 1.0), [0.5], 0.25, LocalModel(0.5, [1.0], [[0.0]]))
    assert abs(val) < 1e-12


def test_tail_and_phi_bar_closed_forms():
    ker = LevyKernel(0.5)
    dom = Interval(0.0, 1.0)
    # 2 * int_{1/2}^inf r^{-3/2} dr
    assert tail_mass(ker, dom, [0.5]) == pytest.approx(4 * np.sqrt(2), rel=1e-13)
    right = ExteriorDatum(lambda p: (np.asarray(p)[:, 0] > 1).astype(float), 1.0)
    assert phi_bar(_problem(right), ker, dom, [0.5]) == pytest.approx(2 * np.sqrt(2), rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.02, 0.98))
def test_tail_mass_table_kernel_against_adaptive_quadrature(x):
    ker = LevyKernel(0.4, 1, "table", {"radii": [0.3, 1.5], "values": [2.0, 0.5, 1.0]})
    dom = Interval(0.0, 1.0)
    dens = lambda r: ker.radial(r) * r ** (-1.4)  # noqa: E731
    ref = 0.0
    for r0 in (x, 1 - x):
        pts = [p for p in (0.3, 1.5) if p > r0]
        ref += scipy_quad(dens, r0, 10, points=pts, limit=200)[0] + scipy_quad(dens, 10, np.inf)[0]
    assert tail_mass(ker, dom, [x]) == pytest.approx(ref, rel=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.floats(1e-6, 0.5), st.floats(0.05, 0.95))
def test_theta0_bounds_tail_times_d_alpha(d, alpha):
    ker = LevyKernel(alpha)
    assert tail_mass(ker, Interval(0.0, 1.0), [d]) * d**alpha <= theta0(ker) * (1 + 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 4.0), st.floats(0.0, 0.9))
def test_power_integral_matches_quadrature(hi, lo_frac):
    ker = LevyKernel(0.6, 1, "cutoff", {"radius": 1.0, "value": 3.0})
    lo = lo_frac * hi + 1e-3
    ref = scipy_quad(lambda r: ker.radial(r) * r**-1.6, lo, hi, points=[1.0] if lo < 1 < hi else None)[0]
    assert ker.power_integral(lo, hi, -1.6) == pytest.approx(ref, rel=1e-9, abs=1e-12)


def test_censored_operator_ignores_exterior_and_kills_constants():
    dom = Interval(0.0, 1.0)
    g = Grid(dom, n=63)
    ker = LevyKernel(0.5)
    u1 = GridFunction(g, np.ones(len(g)), ExteriorDatum.constant(0.0))
    u2 = GridFunction(g, np.ones(len(g)), ExteriorDatum.constant(5.0))
    for i in (0, 10, 31):
        x = g.nodes[i]
        a = apply_censored(u1, ker, dom, x, 0.5 * g.h)
        b = apply_censored(u2, ker, dom, x, 0.5 * g.h)
        assert a == b
        assert abs(a) < 1e-12


def test_kernel_validation():
    with pytest.raises(ValueError):
        LevyKernel(1.0)
    with pytest.raises(ValueError):
        LevyKernel(0.5, 1, "table", {"radii": [1.0], "values": [1.0]})
    with pytest.raises(ValueError):
        kernel_density(LevyKernel(0.5), 0.0)
    with pytest.raises(ValueError):
        LevyKernel(0.5, 1, lambda z: np.ones(len(z)))
    assert LevyKernel(0.5).check_ellipticity()
    assert not LevyKernel(0.5, 1, "zero").check_ellipticity()


def test_mu0_positive_with_discount_or_tail():
    dom = Interval(0.0, 1.0)
    g = Grid(dom, n=31)
    ker = LevyKernel(0.5)
    rep = mu0_estimate(_problem(ExteriorDatum.constant(0.0), lam=0.0), ker, dom, g)
    assert not rep.violated and rep.mu0 > 0
    rep = mu0_estimate(_problem(ExteriorDatum.constant(0.0), lam=0.0), LevyKernel(0.5, 1, "zero"), dom, g)
    assert rep.violated
