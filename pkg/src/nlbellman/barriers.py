"""Barrier functions d^sigma and zeta = log d, and numerical certification of their
subsolution inequalities near the inward-drift part of the boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .geometry import Domain, OutOfBandError, as_points, classify_boundary
from .hamiltonian import H_envelopes
from .kernel import LevyKernel, LocalModel, QuadratureSpec, apply_censored

__all__ = [
    "BarrierReport",
    "eval_zeta",
    "eval_d_sigma",
    "censored_d_sigma",
    "censored_zeta",
    "residual_d_sigma",
    "residual_zeta",
    "certify_barriers",
    "BallCut",
    "DEFAULT_SWEEP",
]

DEFAULT_SWEEP = 2.0 ** -np.arange(4, 13)
# inner radius as a fraction of d(x), and grading levels toward the boundary
INNER_FRACTION = 2.0 ** -10
EXIT_LEVELS = 40


def eval_zeta(domain: Domain, x):
    """log d(x) inside, 0 outside, -inf on the boundary."""
    d = np.atleast_1d(domain.signed_distance(as_points(x, domain.dim)))
    with np.errstate(divide="ignore"):
        out = np.where(d > 0, np.log(np.where(d > 0, d, 1.0)), np.where(d == 0, -np.inf, 0.0))
    single = np.ndim(x) == 0 or (np.ndim(x) == 1 and domain.dim > 1)
    return float(out[0]) if single else out


def eval_d_sigma(domain: Domain, x, sigma: float):
    d = np.atleast_1d(domain.signed_distance(as_points(x, domain.dim)))
    return np.maximum(d, 0.0) ** sigma


class BallCut:
    """Omega' = Omega intersected with the ball B_r(center); convex when Omega is."""

    def __init__(self, domain: Domain, center, radius: float):
        self.base = domain
        self.center = np.asarray(center, dtype=float).reshape(-1)
        self.radius = float(radius)
        self.dim = domain.dim
        self.delta0 = domain.delta0

    @property
    def diameter(self):
        return min(self.base.diameter, 2 * self.radius)

    def signed_distance(self, x):
        p = as_points(x, self.dim)
        d = np.minimum(np.atleast_1d(self.base.signed_distance(p)),
                       self.radius - np.linalg.norm(p - self.center, axis=1))
        single = np.ndim(x) == 0 or (np.ndim(x) == 1 and self.dim > 1)
        return float(d[0]) if single else d

    def exit_distance(self, x, directions):
        x = np.asarray(x, dtype=float).reshape(-1)
        th = np.asarray(directions, dtype=float).reshape(-1, self.dim)
        q = x - self.center
        pb = th @ q
        ball = -pb + np.sqrt(np.maximum(pb * pb - (q @ q - self.radius**2), 0.0))
        return np.minimum(self.base.exit_distance(x, th), ball)


def _setup(domain, x, quad):
    x = np.asarray(x, dtype=float).reshape(-1)
    d = float(domain.signed_distance(x if domain.dim > 1 else x[0]))
    if not 0 < d < domain.delta0:
        raise OutOfBandError(f"d(x) = {d:.3g} outside (0, delta0 = {domain.delta0:.3g})")
    Dd = np.asarray(domain.distance_gradient(x.reshape(1, -1))).reshape(-1)
    D2d = domain.distance_hessian(x.reshape(1, -1))[0]
    quad = quad or QuadratureSpec()
    quad = replace(quad, exit_levels=max(quad.exit_levels, EXIT_LEVELS))
    breaks = None
    if domain.dim == 1:
        breaks = [0.5 * (domain.a + domain.b)]  # ridge of d
    return x, d, Dd, D2d, quad, breaks


def censored_d_sigma(domain: Domain, kernel: LevyKernel, x, sigma: float,
                     quad: Optional[QuadratureSpec] = None, region=None) -> float:
    """I_Omega[d^sigma](x) with the exact local model on the inner ball."""
    x, d, Dd, D2d, quad, breaks = _setup(domain, x, quad)
    grad = sigma * d ** (sigma - 1) * Dd
    hess = sigma * (sigma - 1) * d ** (sigma - 2) * np.outer(Dd, Dd) + sigma * d ** (sigma - 1) * D2d
    model = LocalModel(d**sigma, grad, hess)
    dom = region or domain
    u = lambda p: eval_d_sigma(domain, p, sigma)
    return apply_censored(u, kernel, dom, x, INNER_FRACTION * d, model, quad, breaks=breaks)


def censored_zeta(domain: Domain, kernel: LevyKernel, x, quad: Optional[QuadratureSpec] = None,
                  region=None, facing_only: bool = False) -> float:
    """I_Omega[zeta](x) with the exact local model on the inner ball.

    ``facing_only`` keeps only jumps landing closer to the boundary than x
    (a diagnostic: this part alone scales exactly like d^-alpha on a
    half-line).
    """
    x, d, Dd, D2d, quad, breaks = _setup(domain, x, quad)
    dom = region or domain
    if facing_only:
        lz = np.log(d)

        def u(p):
            z = eval_zeta(domain, p)
            dp = np.atleast_1d(domain.signed_distance(as_points(p, domain.dim)))
            return np.where(dp < d, z, lz)

        return apply_censored(u, kernel, dom, x, INNER_FRACTION * d, None, quad, breaks=breaks)
    model = LocalModel(np.log(d), Dd / d, D2d / d - np.outer(Dd, Dd) / d**2)
    u = lambda p: eval_zeta(domain, p)
    return apply_censored(u, kernel, dom, x, INNER_FRACTION * d, model, quad, breaks=breaks)


def residual_d_sigma(domain: Domain, kernel: LevyKernel, problem, x, sigma: float,
                     quad: Optional[QuadratureSpec] = None, region=None) -> float:
    """-I_Omega[d^sigma](x) + H_s(x, D d^sigma(x))."""
    if not 0 < sigma <= 1:
        raise ValueError("sigma must lie in (0, 1]")
    x = np.asarray(x, dtype=float).reshape(-1)
    nonlocal_part = -censored_d_sigma(domain, kernel, x, sigma, quad, region)
    d = float(domain.signed_distance(x if domain.dim > 1 else x[0]))
    Dd = np.asarray(domain.distance_gradient(x.reshape(1, -1))).reshape(-1)
    _, hs = H_envelopes(problem, x.reshape(1, -1), (sigma * d ** (sigma - 1) * Dd).reshape(1, -1))
    return nonlocal_part + float(np.atleast_1d(hs)[0])


def residual_zeta(domain: Domain, kernel: LevyKernel, problem, x,
                  quad: Optional[QuadratureSpec] = None, region=None) -> tuple[float, float]:
    """(-I_Omega[zeta](x) + H_s(x, Dd/d), -I_Omega[zeta](x))."""
    x = np.asarray(x, dtype=float).reshape(-1)
    nonlocal_part = -censored_zeta(domain, kernel, x, quad, region)
    d = float(domain.signed_distance(x if domain.dim > 1 else x[0]))
    Dd = np.asarray(domain.distance_gradient(x.reshape(1, -1))).reshape(-1)
    _, hs = H_envelopes(problem, x.reshape(1, -1), (Dd / d).reshape(1, -1))
    return nonlocal_part + float(np.atleast_1d(hs)[0]), nonlocal_part


@dataclass
class BarrierReport:
    applicable: bool
    sigma: float
    alpha: float
    r_bar: float = np.nan
    samples: np.ndarray = field(default_factory=lambda: np.empty((0, 1)))
    distances: np.ndarray = field(default_factory=lambda: np.empty(0))
    residual_dsigma: np.ndarray = field(default_factory=lambda: np.empty(0))
    residual_zeta: np.ndarray = field(default_factory=lambda: np.empty(0))
    I_omega_zeta: np.ndarray = field(default_factory=lambda: np.empty(0))
    I_omega_dsigma: np.ndarray = field(default_factory=lambda: np.empty(0))
    fitted_c0_tilde: float = np.nan
    fitted_c0: float = np.nan
    fitted_C: float = np.nan
    fitted_C_sigma: float = np.nan
    slope: float = np.nan
    slope_facing: float = np.nan
    eps_cert: float = np.nan
    signs_ok: bool = False
    certified: bool = False
    stability: dict = field(default_factory=dict)

    @property
    def slope_ok(self) -> bool:
        return bool(abs(self.slope + self.alpha) <= 0.05)

    def constants(self) -> dict:
        return {"c0_tilde": self.fitted_c0_tilde, "c0": self.fitted_c0,
                "C": self.fitted_C, "C_sigma": self.fitted_C_sigma}

    def rows(self):
        for i in range(len(self.distances)):
            yield [*[float(c) for c in self.samples[i]], float(self.distances[i]),
                   float(self.residual_dsigma[i]), float(self.residual_zeta[i]), float(self.I_omega_zeta[i])]

    def summary(self) -> dict:
        out = {"applicable": self.applicable, "sigma": self.sigma, "alpha": self.alpha, "r_bar": self.r_bar,
               "signs_ok": self.signs_ok, "certified": self.certified, "eps_cert": self.eps_cert,
               "slope": self.slope, "slope_target": -self.alpha, "slope_ok": self.slope_ok if self.applicable else None,
               "slope_boundary_facing": self.slope_facing}
        out.update(self.constants())
        if self.stability:
            out["stability"] = self.stability
        return out


def _sweep_points(domain, problem, sweep, n_samples):
    cls = classify_boundary(domain, problem, n_samples=n_samples)
    idx = cls.indices("In")
    pts, dist = [], []
    for i in idx:
        x0 = cls.samples[i]
        nrm = np.asarray(domain.distance_gradient(x0.reshape(1, -1), check=False)).reshape(-1)
        for d in sweep:
            pts.append(x0 + d * nrm)
            dist.append(d)
    return cls, np.array(pts).reshape(-1, domain.dim), np.array(dist)


def _fit(report: BarrierReport, facing=None):
    d = report.distances
    s, a = report.sigma, report.alpha
    report.fitted_c0_tilde = float(np.min(-report.residual_dsigma * d ** (1 - s)))
    report.fitted_c0 = float(np.min(-report.residual_zeta * d))
    report.fitted_C = float(np.max(np.abs(report.I_omega_zeta) * d**a))
    report.fitted_C_sigma = float(np.max(np.abs(report.I_omega_dsigma) * d ** (a - s)))
    report.slope = float(np.polyfit(np.log(d), np.log(np.abs(report.I_omega_zeta)), 1)[0])
    if facing is not None:
        report.slope_facing = float(np.polyfit(np.log(d), np.log(np.abs(facing)), 1)[0])


def certify_barriers(domain: Domain, kernel: LevyKernel, problem, sigma: Optional[float] = None,
                     sweep: Sequence[float] = DEFAULT_SWEEP, quad: Optional[QuadratureSpec] = None,
                     n_samples: int = 16, check_refinement: bool = True,
                     eps_cert: Optional[float] = None) -> BarrierReport:
    """Run both barrier checks along the inward normal at every Gamma_in sample.

    Fitted constants (all positive when certification succeeds):
      c0_tilde  largest c with  residual_dsigma <= -c d^{sigma-1}
      c0        largest c with  residual_zeta   <= -c / d
      C         smallest C with |I_Omega[zeta]| <= C d^{-alpha}
      C_sigma   smallest C with |I_Omega[d^sigma]| <= C d^{sigma-alpha}
    """
    quad = quad or QuadratureSpec()
    sigma = 1.0 - kernel.alpha if sigma is None else float(sigma)
    sweep = np.sort(np.asarray(sweep, dtype=float))[::-1]
    sweep = sweep[sweep < domain.delta0]
    cls, pts, dist = _sweep_points(domain, problem, sweep, n_samples)
    if len(pts) == 0:
        return BarrierReport(False, sigma, kernel.alpha)

    def run(q):
        rd, rz, iz, ids, fz = [], [], [], [], []
        for p in pts:
            ids.append(censored_d_sigma(domain, kernel, p, sigma, q))
            rd.append(residual_d_sigma(domain, kernel, problem, p, sigma, q))
            r, nz = residual_zeta(domain, kernel, problem, p, q)
            rz.append(r)
            iz.append(-nz)
            fz.append(censored_zeta(domain, kernel, p, q, facing_only=True))
        rep = BarrierReport(True, sigma, kernel.alpha, samples=pts, distances=dist,
                            residual_dsigma=np.array(rd), residual_zeta=np.array(rz),
                            I_omega_zeta=np.array(iz), I_omega_dsigma=np.array(ids))
        _fit(rep, np.array(fz))
        return rep

    rep = run(quad)
    rep.signs_ok = bool(np.all(rep.residual_dsigma < 0) and np.all(rep.residual_zeta < 0))
    rep.eps_cert = 0.5 * rep.fitted_c0_tilde if eps_cert is None else float(eps_cert)
    ok = (rep.residual_dsigma <= -rep.eps_cert * dist ** (sigma - 1)) & (rep.residual_zeta < 0)
    rep.certified = bool(rep.signs_ok and np.all(ok) and rep.eps_cert > 0)
    # empirical band: largest sweep distance below which every point certifies
    order = np.argsort(dist)
    run_ok = np.cumprod(ok[order]).astype(bool)
    rep.r_bar = float(dist[order][run_ok].max()) if run_ok.any() else 0.0
    if check_refinement:
        fine = run(quad.refined())
        rel = {}
        for key, v in rep.constants().items():
            w = fine.constants()[key]
            rel[key] = float(abs(w - v) / abs(v)) if v != 0 else float("inf")
        rel["max_relative_change"] = max(rel.values())
        rel["stable"] = bool(rel["max_relative_change"] < 0.05)
        rep.stability = rel
    return rep
