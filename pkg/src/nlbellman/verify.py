"""Post-hoc checks on computed solutions.

* viscosity residuals E_delta with a local quadratic fit as test function
* cone extrapolation of interior values toward boundary points
* boundary attainment / loss reports per boundary label
* comparison experiments for ordered exterior data
* residuals of the transformed fields U = u + A d^(1-alpha), V, W = U - V
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .barriers import censored_d_sigma
from .geometry import ConeSpec, Domain, InfeasibleConeError, as_points, classify_boundary, cone_points
from .grid import GridFunction
from .hamiltonian import H, H_envelopes
from .kernel import LocalModel, QuadratureSpec, apply_censored, apply_split, theta0
from .solver import DiscreteScheme, policy_iteration

__all__ = [
    "FitError",
    "PreconditionError",
    "quadratic_fit",
    "viscosity_residual",
    "viscosity_residuals",
    "phi_extension",
    "aitken_limit",
    "cone_extrapolate",
    "BoundaryReport",
    "boundary_report",
    "ComparisonReport",
    "comparison_experiment",
    "TransformedField",
    "transform_amplitude",
    "transform_residual",
    "slack",
    "grid_cone",
    "gamma_in_band",
]


class FitError(ValueError):
    pass


class PreconditionError(ValueError):
    pass


_STENCIL_2D = [(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1),
               (2, 0), (-2, 0), (0, 2), (0, -2)]


def _stencil(grid, i: int) -> np.ndarray:
    if grid.dim == 1:
        idx = np.arange(i - 2, i + 3)
        if idx[0] < 0 or idx[-1] >= len(grid):
            raise FitError(f"node {i} lacks the 5-node neighbourhood")
        return idx
    lat = grid.lattice[i]
    off = grid._offset
    out = []
    for di, dj in _STENCIL_2D:
        a, b = lat[0] + di, lat[1] + dj
        j = grid._index[a + off[0], b + off[1]] if abs(a) <= off[0] and abs(b) <= off[1] else -1
        if j < 0:
            raise FitError(f"node {i} lacks the 13-node neighbourhood")
        out.append(j)
    return np.array(out)


def quadratic_fit(u: GridFunction, i: int) -> LocalModel:
    """Least-squares quadratic through the 5-node (1D) or 13-node (2D) neighbourhood of node i."""
    g = u.grid
    idx = _stencil(g, i)
    s = (g.nodes[idx] - g.nodes[i]) / g.h
    if g.dim == 1:
        M = np.column_stack([np.ones(len(s)), s[:, 0], 0.5 * s[:, 0] ** 2])
    else:
        x, y = s[:, 0], s[:, 1]
        M = np.column_stack([np.ones(len(s)), x, y, 0.5 * x * x, x * y, 0.5 * y * y])
    coef, *_ = np.linalg.lstsq(M, u.values[idx], rcond=None)
    h = g.h
    if g.dim == 1:
        return LocalModel(coef[0], [coef[1] / h], [[coef[2] / h**2]])
    hess = np.array([[coef[3], coef[4]], [coef[4], coef[5]]]) / h**2
    return LocalModel(coef[0], coef[1:3] / h, hess)


def viscosity_residual(u: GridFunction, domain: Domain, kernel, problem, i: int, delta: Optional[float] = None,
                       side: str = "sub", quad: Optional[QuadratureSpec] = None) -> float:
    """E_delta(u^phi, q, x_i) = lambda u - I_delta[q] - I^delta[u^phi] + H(x, Dq), q the quadratic fit.

    A subsolution expects a value <= slack, a supersolution >= -slack.
    The value returned is the same for both sides; ``side`` is validated only.
    """
    if side not in ("sub", "super"):
        raise ValueError("side must be 'sub' or 'super'")
    quad = quad or QuadratureSpec()
    g = u.grid
    x = g.nodes[i]
    if delta is None:
        delta = quad.default_delta(g.h, g.distance[i])
    model = quadratic_fit(u, i)
    nonlocal_part = apply_split(u, kernel, domain, x, delta, model, quad)
    return float(problem.lam * u.values[i] - nonlocal_part + H(problem, x.reshape(1, -1), model.grad.reshape(1, -1))[0])


def viscosity_residuals(u: GridFunction, domain, kernel, problem, min_depth_h: float = 4.0,
                        quad: Optional[QuadratureSpec] = None) -> tuple[np.ndarray, np.ndarray]:
    """Residuals at every node with d >= min_depth_h * h (a compact interior subset)."""
    g = u.grid
    nodes = np.flatnonzero(g.distance >= min_depth_h * g.h)
    vals = []
    keep = []
    for i in nodes:
        try:
            vals.append(viscosity_residual(u, domain, kernel, problem, i, quad=quad))
            keep.append(i)
        except FitError:
            continue
    return np.array(keep, dtype=int), np.array(vals)


def slack(h: float, alpha: float, c_slack: float = 1.0) -> float:
    """Consistency allowance c_slack * h^(1-alpha) for residual sign checks."""
    return c_slack * h ** (1.0 - alpha)


def phi_extension(u: GridFunction, x, kind: str = "upper") -> np.ndarray:
    """u inside, phi outside, max (upper) or min (lower) of the two on the boundary."""
    p = as_points(x, u.grid.dim)
    d = np.atleast_1d(u.grid.domain.signed_distance(p))
    out = np.empty(len(p))
    inside = d > 0
    outside = d < 0
    on = ~inside & ~outside
    if np.any(inside):
        out[inside] = u.inside(p[inside])
    if np.any(outside):
        out[outside] = u.exterior(p[outside])
    if np.any(on):
        a, b = u.inside(p[on]), u.exterior(p[on])
        out[on] = np.maximum(a, b) if kind == "upper" else np.minimum(a, b)
    return out


def aitken_limit(values: Sequence[float]) -> tuple[float, float]:
    """Limit of a geometrically converging sequence and the last-level uncertainty.

    Aitken's delta-squared (Richardson with fitted rate) is applied to the
    last two triples; the uncertainty is the difference of the two
    estimates.  When the rate estimate leaves (0, 1) the last value is used
    with the last increment as uncertainty.
    """
    v = np.asarray(values, dtype=float)
    if len(v) < 3:
        raise ValueError("need at least three levels")

    def one(a, b, c):
        d1, d2 = b - a, c - b
        den = d2 - d1
        if d1 == 0 or den == 0:
            return c, True
        r = d2 / d1
        if not 0 < r < 1:
            return c, False
        return c - d2 * d2 / den, True

    last, ok = one(*v[-3:])
    if not ok:
        return float(v[-1]), float(abs(v[-1] - v[-2]))
    if len(v) >= 4:
        prev, ok2 = one(*v[-4:-1])
        unc = abs(last - prev) if ok2 else abs(v[-1] - v[-2])
    else:
        unc = abs(v[-1] - v[-2])
    return float(last), float(unc)


def cone_extrapolate(u, spec: ConeSpec, k: int = 5, domain: Optional[Domain] = None) -> tuple[float, float]:
    """Extrapolated boundary limit of ``u`` along the cone points x_0 + t_j dir."""
    domain = domain or u.grid.domain
    pts = cone_points(domain, spec, k)
    vals = u.inside(pts) if isinstance(u, GridFunction) else np.asarray(u(pts), dtype=float)
    return aitken_limit(vals)


def grid_cone(u: GridFunction, x0, t_min_h: float = 8.0, levels: int = 5, C: float = 0.5) -> ConeSpec:
    """Normal cone at x0 whose points sit t_min_h*h, 2 t_min_h*h, ... from the vertex.

    The discrete solution carries a relative error of order h/t at distance t
    from the boundary, so the innermost point is kept several cells away.
    """
    g = u.grid
    t0 = t_min_h * g.h * 2 ** (levels - 1)
    return ConeSpec(np.asarray(x0, dtype=float), C=C, ratio=0.5, t0=t0)


def _fitted_cone(u, domain, x0, t_min_h, levels):
    tm = t_min_h
    while True:
        for k in range(levels, 2, -1):
            try:
                return cone_extrapolate(u, grid_cone(u, x0, tm, k), k, domain)
            except InfeasibleConeError:
                continue
        if tm <= 1.0:
            raise InfeasibleConeError(f"no admissible cone at {np.ravel(x0)} on this grid")
        tm = max(tm / 2, 1.0)


@dataclass
class BoundaryReport:
    samples: np.ndarray
    labels: list
    phi: np.ndarray
    limit: np.ndarray
    gap: np.ndarray  # signed, limit - phi
    uncertainty: np.ndarray
    passed: np.ndarray
    tol: float

    @property
    def all_passed(self) -> bool:
        return bool(np.all(self.passed))

    def max_gap(self, label: str) -> float:
        sel = [i for i, lab in enumerate(self.labels) if lab == label]
        return float(np.max(np.abs(self.gap[sel]))) if sel else float("nan")

    def rows(self):
        for i in range(len(self.labels)):
            yield [i, *[float(c) for c in self.samples[i]], self.labels[i], float(self.phi[i]), float(self.limit[i]),
                   float(self.gap[i]), float(self.uncertainty[i]), bool(self.passed[i])]


def boundary_report(u: GridFunction, domain: Domain, classification, problem, tol: float = 1e-2,
                    t_min_h: float = 8.0, levels: int = 5) -> BoundaryReport:
    """Extrapolated boundary values against phi.

    Out samples must attain phi (|gap| <= tol + uncertainty), Mixed samples
    must satisfy the one-sided bound gap <= tol + uncertainty, In samples are
    reported without constraint.  On coarse grids the cone is shortened
    (fewer levels, down to three) and then pulled in (t_min_h halved, down to
    one cell) until it fits inside the domain.
    """
    n = len(classification.labels)
    lim = np.empty(n)
    unc = np.empty(n)
    for i, x0 in enumerate(classification.samples):
        lim[i], unc[i] = _fitted_cone(u, domain, x0, t_min_h, levels)
    ph = problem.phi(classification.samples)
    gap = lim - ph
    passed = np.ones(n, dtype=bool)
    for i, lab in enumerate(classification.labels):
        if lab == "Out":
            passed[i] = abs(gap[i]) <= tol + unc[i]
        elif lab == "Mixed":
            passed[i] = gap[i] <= tol + unc[i]
    return BoundaryReport(classification.samples, list(classification.labels), ph, lim, gap, unc, passed, tol)


@dataclass
class ComparisonReport:
    violations: int
    max_excess: float
    min_difference: float
    boundary_violations: int
    u1: np.ndarray
    u2: np.ndarray

    @property
    def passed(self) -> bool:
        return self.violations == 0 and self.boundary_violations == 0


def _exterior_samples(scheme: DiscreteScheme) -> np.ndarray:
    pts = [scheme.ext_points]
    for idx, _, gp in scheme.ghosts:
        if len(idx):
            pts.append(gp)
    pts.append(scheme.domain.boundary_samples(64))
    return np.vstack(pts)


def comparison_experiment(scheme: DiscreteScheme, phi1, phi2, tol: float = 1e-9, boundary_tol: float = 1e-6,
                          check_boundary: bool = True) -> ComparisonReport:
    """Solve with two ordered exterior data and count nodes where u1 > u2.

    The nodewise check uses zero tolerance.  Extrapolated boundary values
    are compared with ``boundary_tol``.
    """
    samples = _exterior_samples(scheme)
    if np.any(phi1(samples) > phi2(samples)):
        raise PreconditionError("exterior data are not ordered (phi1 > phi2 at some sample)")
    s1, s2 = scheme.with_phi(phi1), scheme.with_phi(phi2)
    r1 = policy_iteration(s1, tol)
    r2 = policy_iteration(s2, tol)
    diff = r2.u - r1.u
    viol = int(np.sum(r1.u > r2.u))
    bviol = 0
    if check_boundary:
        cls = classify_boundary(scheme.domain, scheme.problem, n_samples=16)
        for x0 in cls.samples:
            try:
                l1, _ = cone_extrapolate(r1.values, grid_cone(r1.values, x0))
                l2, _ = cone_extrapolate(r2.values, grid_cone(r2.values, x0))
            except ValueError:
                continue
            bviol += int(l1 > l2 + boundary_tol)
    return ComparisonReport(viol, float(max(0.0, -diff.min())), float(diff.min()), bviol, r1.u, r2.u)


@dataclass
class TransformedField:
    """U = u + A d^(1-alpha), V = v - A d^(1-alpha), or W = U - V on the nodes."""

    base: GridFunction
    A: float
    kind: str
    other: Optional[GridFunction] = None  # v for W

    def __post_init__(self):
        if self.kind not in ("U", "V", "W"):
            raise ValueError("kind must be U, V or W")
        if self.A < 0:
            raise ValueError("amplitude must be nonnegative")
        if self.kind == "W" and self.other is None:
            raise ValueError("W needs the supersolution field")

    @property
    def sign(self) -> float:
        return -1.0 if self.kind == "V" else 1.0

    def nodal(self, alpha: float) -> np.ndarray:
        g = self.base.grid
        dpow = g.distance ** (1 - alpha)
        if self.kind == "U":
            return self.base.values + self.A * dpow
        if self.kind == "V":
            return self.base.values - self.A * dpow
        return (self.base.values + self.A * dpow) - (self.other.values - self.A * dpow)


def transform_amplitude(kernel, u_sup: float, phi_sup: float, c0_tilde: float) -> float:
    """A = 2 theta_0 (|u| + |phi|) / c0_tilde."""
    return 2.0 * theta0(kernel) * (u_sup + phi_sup) / c0_tilde


def transform_residual(fld: TransformedField, domain: Domain, kernel, problem, i: int,
                       delta: Optional[float] = None, quad: Optional[QuadratureSpec] = None) -> float:
    """-I_Omega[w](x_i) + H_s(x_i, Dw) for U and V, -I_Omega[w] + H_i(x_i, Dw) for W.

    The grid part uses the quadratic fit on the inner ball; the
    A d^(1-alpha) part is evaluated analytically.  U and W are expected
    <= slack, V >= -slack.
    """
    quad = quad or QuadratureSpec()
    g = fld.base.grid
    x = g.nodes[i]
    if delta is None:
        delta = quad.default_delta(g.h, g.distance[i])
    sigma = 1.0 - kernel.alpha
    d = g.distance[i]
    Dd = np.asarray(domain.distance_gradient(x.reshape(1, -1))).reshape(-1)
    if fld.kind == "W":
        diff = GridFunction(g, fld.base.values - fld.other.values, None)
        base = -apply_censored(diff, kernel, domain, x, delta, quadratic_fit(diff, i), quad)
        grad = quadratic_fit(diff, i).grad
        amp = 2.0 * fld.A
    else:
        base = -apply_censored(fld.base, kernel, domain, x, delta, quadratic_fit(fld.base, i), quad)
        grad = quadratic_fit(fld.base, i).grad
        amp = fld.sign * fld.A
    if amp != 0:
        base += -amp * censored_d_sigma(domain, kernel, x, sigma, quad)
        grad = grad + amp * sigma * d ** (sigma - 1) * Dd
    hi, hs = H_envelopes(problem, x.reshape(1, -1), grad.reshape(1, -1))
    return float(base + (hi[0] if fld.kind == "W" else hs[0]))


def gamma_in_band(grid, classification, a: float) -> np.ndarray:
    """Node indices within distance a of some Gamma_in sample."""
    idx = classification.indices("In")
    if len(idx) == 0:
        return np.empty(0, dtype=int)
    pts = classification.samples[idx]
    dist = np.min(np.linalg.norm(grid.nodes[:, None, :] - pts[None, :, :], axis=2), axis=1)
    return np.flatnonzero(dist < a)
