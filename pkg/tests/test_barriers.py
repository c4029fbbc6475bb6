import numpy as np
import pytest
from scipy.integrate import quad as scipy_quad

from nlbellman.barriers import (
    BallCut,
    censored_d_sigma,
    censored_zeta,
    certify_barriers,
    eval_d_sigma,
    eval_zeta,
    residual_d_sigma,
    residual_zeta,
)
from nlbellman.geometry import Disk, Interval, OutOfBandError
from nlbellman.hamiltonian import Control, ControlProblem, ExteriorDatum
from nlbellman.kernel import LevyKernel

ALPHA = 0.5
SIGMA = 1 - ALPHA


def _censored_oracle(f, d, alpha=ALPHA):
    """I_Omega[f(dist)](d) on (0, 1) with K = 1 by adaptive quadrature."""
    dist = lambda y: min(y, 1 - y)  # noqa: E731
    near = scipy_quad(lambda z: (f(d + z) + f(d - z) - 2 * f(d)) * z ** (-1 - alpha), 0, d, limit=200)[0]
    far = scipy_quad(lambda z: (f(dist(d + z)) - f(d)) * z ** (-1 - alpha), d, 1 - d,
                     points=[0.5 - d, 1 - 2 * d], limit=400)[0]
    return near + far


def _inward(b=1.0, dim=1):
    if dim == 1:
        return ControlProblem([Control(np.zeros((1, 1)), [b], [0.0])], 1.0, ExteriorDatum.constant(0.0), 1)
    return ControlProblem([Control(-b * np.eye(2), [0.0, 0.0], [0.0])], 1.0, ExteriorDatum.constant(0.0, 2), 2)


@pytest.mark.parametrize("d", [2.0**-4, 2.0**-8, 2.0**-12])
def test_censored_barrier_integrals_against_adaptive_quadrature(d):
    dom, ker = Interval(0.0, 1.0), LevyKernel(ALPHA)
    assert censored_zeta(dom, ker, [d]) == pytest.approx(_censored_oracle(np.log, d), rel=1e-8)
    ref = _censored_oracle(lambda y: y**SIGMA, d)
    assert censored_d_sigma(dom, ker, [d], SIGMA) == pytest.approx(ref, rel=1e-8)


def test_censored_d_sigma_is_positive_near_boundary():
    # jumps into the interior gain more than jumps toward the boundary lose
    dom, ker = Interval(0.0, 1.0), LevyKernel(ALPHA)
    vals = [censored_d_sigma(dom, ker, [d], SIGMA) for d in 2.0 ** -np.arange(4, 13, 2)]
    assert np.all(np.array(vals) > 0)
    assert np.all(np.diff(vals) > 0)


def test_residuals_negative_for_inward_drift():
    dom, ker, prob = Interval(0.0, 1.0), LevyKernel(ALPHA), _inward()
    for d in 2.0 ** -np.arange(4, 13, 2):
        assert residual_d_sigma(dom, ker, prob, [d], SIGMA) < 0
        total, nonlocal_part = residual_zeta(dom, ker, prob, [d])
        assert total < 0
        assert total == pytest.approx(nonlocal_part - 1.0 / d)


def test_d_sigma_residual_decomposition():
    # -I_Omega[d^sigma] + H_s(D d^sigma) with H_s(p) = -b p for a single drift b
    dom, ker, prob = Interval(0.0, 1.0), LevyKernel(ALPHA), _inward(b=2.0)
    d = 2.0**-10
    r = residual_d_sigma(dom, ker, prob, [d], SIGMA)
    expected = -censored_d_sigma(dom, ker, [d], SIGMA) - 2.0 * SIGMA * d ** (SIGMA - 1)
    assert r == pytest.approx(expected, rel=1e-12)


def test_barrier_evaluation_and_band():
    dom = Interval(0.0, 1.0)
    assert eval_zeta(dom, 0.25) == pytest.approx(np.log(0.25))
    assert eval_zeta(dom, 1.5) == 0.0
    assert eval_zeta(dom, 0.0) == -np.inf
    assert np.allclose(eval_d_sigma(dom, np.array([0.25, -1.0]), 0.5), [0.5, 0.0])
    with pytest.raises(OutOfBandError):
        censored_zeta(dom, LevyKernel(ALPHA), [0.5])


def test_ball_cut_distance_and_exit():
    cut = BallCut(Interval(0.0, 1.0), [0.1], 0.3)
    assert cut.signed_distance(0.35) == pytest.approx(0.05)
    assert cut.signed_distance(0.05) == pytest.approx(0.05)
    ex = cut.exit_distance([0.1], np.array([[1.0], [-1.0]]))
    assert np.allclose(ex, [0.3, 0.1])


def test_certify_inward_interval():
    sweep = 2.0 ** -np.arange(4, 13, 2)
    rep = certify_barriers(Interval(0.0, 1.0), LevyKernel(ALPHA), _inward(), sweep=sweep, check_refinement=False)
    assert rep.applicable and rep.signs_ok and rep.certified
    assert rep.fitted_c0_tilde > 0 and rep.fitted_c0 > 0
    assert len(rep.distances) == len(sweep)  # only x = 0 is Gamma_in
    assert rep.r_bar == pytest.approx(sweep.max())
    # the boundary-facing half of I_Omega[zeta] scales like d^-alpha
    assert rep.slope_facing == pytest.approx(-ALPHA, abs=0.01)


def test_certify_disk_contracting_drift():
    sweep = 2.0 ** -np.arange(4, 9, 2)
    rep = certify_barriers(Disk((0.0, 0.0), 1.0), LevyKernel(ALPHA, 2), _inward(dim=2), sweep=sweep,
                           n_samples=4, check_refinement=False)
    assert rep.applicable and rep.signs_ok and rep.certified


def test_certify_not_applicable_without_gamma_in():
    prob = ControlProblem([Control(np.zeros((1, 1)), [0.0], [0.0])], 1.0, ExteriorDatum.constant(0.0), 1)
    rep = certify_barriers(Interval(0.0, 1.0), LevyKernel(ALPHA), prob, check_refinement=False)
    assert not rep.applicable
    assert rep.summary()["slope_ok"] is None


def test_zeta_slope_of_exact_integral():
    # the full censored integral of log d on (0, 1) carries a log(d) factor on
    # top of d^-alpha; the fitted slope over 2^-4..2^-12 is -0.7155, by
    # adaptive quadrature alone
    d = 2.0 ** -np.arange(4, 13)
    exact = [_censored_oracle(np.log, x) for x in d]
    slope = np.polyfit(np.log(d), np.log(np.abs(exact)), 1)[0]
    assert slope == pytest.approx(-0.71554, abs=1e-4)
    computed = [censored_zeta(Interval(0.0, 1.0), LevyKernel(ALPHA), [x]) for x in d]
    assert np.polyfit(np.log(d), np.log(np.abs(computed)), 1)[0] == pytest.approx(slope, abs=1e-6)
