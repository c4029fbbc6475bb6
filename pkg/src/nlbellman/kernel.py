"""Singular Levy kernels and quadrature for the full and censored nonlocal operators.

Every integral over z is written in polar form,

    int g(z) K(z) |z|^{-(n+alpha)} dz = sum_theta w_theta int_0^inf g(r theta) K(r theta) r^{-1-alpha} dr,

with directions {-1, +1} in 1D and an equispaced angular rule in 2D.  Since
every supported domain is convex, the ray from an interior point x leaves
the domain exactly once, at ``r_exit(theta)``, so the censored part of a ray
is ``[delta, r_exit]`` and the exterior part is ``[r_exit, inf)``.

Radial integrals use geometric panels with Gauss-Legendre nodes.  The ball
``|z| < delta`` is handled with a local model of the integrand: either a
quadratic model (value, gradient, Hessian) or a secant model along each ray.
Because alpha < 1 no compensator is needed.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from math import gamma, pi
from typing import Callable, Optional

import numpy as np

from .geometry import Domain, as_points

__all__ = [
    "LevyKernel",
    "QuadratureSpec",
    "LocalModel",
    "NodeRule",
    "kernel_density",
    "theta0",
    "unit_sphere_area",
    "directions",
    "node_rule",
    "tail_mass",
    "lambda_bar",
    "phi_bar",
    "mu0_estimate",
    "apply_split",
    "apply_censored",
    "kernel_from_config",
    "fractional_laplacian_constant",
]


def unit_sphere_area(n: int) -> float:
    return 2.0 if n == 1 else 2.0 * pi


def fractional_laplacian_constant(n: int, alpha: float) -> float:
    """C_{n,alpha} so that the kernel C |z|^{-(n+alpha)} realises -(-Delta)^{alpha/2}."""
    s = alpha / 2
    return 4**s * gamma(n / 2 + s) / (pi ** (n / 2) * abs(gamma(-s)))


class LevyKernel:
    """Density K and order alpha of the jump kernel K(z)|z|^{-(n+alpha)}.

    Built-in densities are radial and piecewise constant in |z|, which
    gives closed forms for the tail mass and for the inner-ball moments:

        constant              K = value
        cutoff                K = value for |z| <= radius, 0 beyond
        table                 K = values[k] on [radii[k-1], radii[k])
        fractional-laplacian  K = C_{n,alpha}
        zero                  K = 0

    A callable ``density(z)`` taking an (m, n) array is also accepted; then
    ``Lambda`` must be given and the tail beyond the truncation radius is
    bracketed between 0 and its Lambda bound.
    """

    def __init__(self, alpha: float, dim: int = 1, density="constant", params: Optional[dict] = None,
                 Lambda: Optional[float] = None, c1: Optional[float] = None, c2: Optional[float] = None):
        if not 0 < alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if dim not in (1, 2):
            raise ValueError("dimension must be 1 or 2")
        self.alpha = float(alpha)
        self.dim = dim
        self.params = dict(params or {})
        self.name = density if isinstance(density, str) else "callable"
        self._callable = None
        p = self.params
        if callable(density):
            if Lambda is None:
                raise ValueError("Lambda is required for a callable density")
            self._callable = density
            self.breaks = np.array(p.get("breaks", []), dtype=float)
            self.levels = None
        elif density == "constant":
            self.breaks, self.levels = np.array([]), np.array([float(p.get("value", 1.0))])
        elif density == "zero":
            self.breaks, self.levels = np.array([]), np.array([0.0])
        elif density == "cutoff":
            self.breaks = np.array([float(p.get("radius", 1.0))])
            self.levels = np.array([float(p.get("value", 1.0)), 0.0])
        elif density == "table":
            self.breaks = np.asarray(p["radii"], dtype=float)
            self.levels = np.asarray(p["values"], dtype=float)
            if len(self.levels) != len(self.breaks) + 1 or np.any(np.diff(self.breaks) <= 0):
                raise ValueError("table needs increasing radii and one more value than radii")
        elif density == "fractional-laplacian":
            self.breaks = np.array([])
            self.levels = np.array([fractional_laplacian_constant(dim, alpha)])
        else:
            raise ValueError(f"unknown kernel density {density!r}")
        if self.levels is not None and np.any(self.levels < 0):
            raise ValueError("kernel density must be nonnegative")
        if self.levels is not None:
            self.Lambda = float(self.levels.max()) if Lambda is None else float(Lambda)
        else:
            self.Lambda = float(Lambda)
        self.c2 = float(c2) if c2 is not None else (float(self.breaks[0]) if len(self.breaks) else 1.0)
        if c1 is None:
            c1 = float(np.min(self.K(self._ball_samples(self.c2)))) if self.Lambda > 0 else 0.0
        self.c1 = float(c1)

    @property
    def is_radial(self) -> bool:
        return self._callable is None

    def _ball_samples(self, radius: float) -> np.ndarray:
        r = radius * np.linspace(1e-3, 1.0, 64)
        if self.dim == 1:
            return np.concatenate([r, -r]).reshape(-1, 1)
        th = 2 * pi * np.arange(16) / 16
        rr, tt = np.meshgrid(r, th)
        return np.column_stack([(rr * np.cos(tt)).ravel(), (rr * np.sin(tt)).ravel()])

    def radial(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        return self.levels[np.searchsorted(self.breaks, r, side="right")]

    def K(self, z) -> np.ndarray:
        pts = as_points(z, self.dim)
        if self._callable is not None:
            return np.asarray(self._callable(pts), dtype=float).reshape(-1)
        return self.radial(np.linalg.norm(pts, axis=1))

    def check_ellipticity(self) -> bool:
        """Sampled check of K >= c1 on |z| <= c2 and K <= Lambda."""
        if self.c1 <= 0:
            return False
        vals = self.K(self._ball_samples(self.c2))
        return bool(np.all(vals >= self.c1 - 1e-14) and np.all(vals <= self.Lambda + 1e-14))

    def power_integral(self, lo, hi, p: float) -> np.ndarray:
        """int_lo^hi K(r) r^p dr for a radial piecewise-constant density (p != -1)."""
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        edges = np.concatenate([[0.0], self.breaks, [np.inf]])
        out = np.zeros(np.broadcast(lo, hi).shape)
        for k, v in enumerate(self.levels):
            if v == 0:
                continue
            a = np.clip(lo, edges[k], edges[k + 1])
            b = np.clip(hi, edges[k], edges[k + 1])
            with np.errstate(divide="ignore", over="ignore"):
                fa = np.where(a == 0, 0.0, a ** (p + 1)) if p + 1 > 0 else a ** (p + 1)
                fb = np.where(np.isinf(b), 0.0, b ** (p + 1)) if p + 1 < 0 else b ** (p + 1)
            out = out + np.where(b > a, v * (fb - fa) / (p + 1), 0.0)
        return out

    def to_config(self) -> dict:
        if self._callable is not None:
            raise ValueError("callable kernels cannot be serialized")
        return {"alpha": self.alpha, "Lambda": self.Lambda, "c1": self.c1, "c2": self.c2,
                "density": self.name, "params": dict(self.params)}


def kernel_from_config(block: dict, dim: int) -> LevyKernel:
    return LevyKernel(block["alpha"], dim, block.get("density", "constant"), block.get("params"),
                      block.get("Lambda"), block.get("c1"), block.get("c2"))


def kernel_density(kernel: LevyKernel, z) -> np.ndarray:
    """K(z) |z|^{-(n+alpha)}."""
    pts = as_points(z, kernel.dim)
    r = np.linalg.norm(pts, axis=1)
    if np.any(r == 0):
        raise ValueError("kernel density is undefined at z = 0")
    out = kernel.K(pts) * r ** (-(kernel.dim + kernel.alpha))
    single = np.ndim(z) == 0 or (np.ndim(z) == 1 and kernel.dim > 1)
    return float(out[0]) if single else out


def theta0(kernel: LevyKernel) -> float:
    """Localisation constant Lambda |S^{n-1}| / alpha bounding tail_mass * d^alpha."""
    return kernel.Lambda * unit_sphere_area(kernel.dim) / kernel.alpha


@dataclass(frozen=True)
class QuadratureSpec:
    panels_per_decade: float = 4.0
    n_gauss: int = 6
    n_angles: int = 64
    truncation_radius: Optional[float] = None
    truncation_factor: float = 50.0
    tail_mode: str = "auto"  # auto | closed_form_constant_K | upper_bound_Lambda
    inner_levels: int = 20
    exit_levels: int = 0
    delta_factor: float = 0.5

    @property
    def ratio(self) -> float:
        return 10.0 ** (1.0 / self.panels_per_decade)

    def refined(self) -> "QuadratureSpec":
        return replace(self, panels_per_decade=2 * self.panels_per_decade)

    def R_inf(self, domain: Domain) -> float:
        if self.truncation_radius is not None:
            if self.truncation_radius < domain.diameter:
                raise ValueError("truncation radius must be at least the domain diameter")
            return float(self.truncation_radius)
        return self.truncation_factor * domain.diameter

    def default_delta(self, h: float, d: float) -> float:
        return self.delta_factor * min(h, d)


def quadrature_from_config(block: Optional[dict]) -> QuadratureSpec:
    block = dict(block or {})
    return QuadratureSpec(**block)


def directions(dim: int, n_angles: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Unit directions and weights of the angular rule (weights sum to |S^{n-1}|)."""
    if dim == 1:
        return np.array([[1.0], [-1.0]]), np.array([1.0, 1.0])
    if n_angles % 2:
        raise ValueError("use an even number of angles so the rule is symmetric")
    t = 2 * pi * (np.arange(n_angles) + 0.5) / n_angles
    return np.column_stack([np.cos(t), np.sin(t)]), np.full(n_angles, 2 * pi / n_angles)


_GL_CACHE: dict = {}


def _gauss(n: int):
    if n not in _GL_CACHE:
        _GL_CACHE[n] = np.polynomial.legendre.leggauss(n)
    return _GL_CACHE[n]


def _ray_rule(kernel: LevyKernel, quad: QuadratureSpec, x, thetas, wtheta, lo, hi, extra=None):
    """Nodes and weights for sum_theta w_theta int_lo^hi F(x + r theta) K r^{-1-alpha} dr.

    Returns (points, weights, ray index).  Panel edges are geometric from
    ``lo`` with the spec's ratio, merged with kernel breaks and any extra
    radii (shape (m, E)); zero-length panels are dropped.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    m = len(thetas)
    valid = hi > lo
    if not np.any(valid):
        return np.empty((0, kernel.dim)), np.empty(0), np.empty(0, dtype=int)
    q = quad.ratio
    span = np.where(valid, hi / np.where(lo > 0, lo, 1.0), 1.0)
    nmax = int(np.ceil(np.log(np.max(span)) / np.log(q))) + 1
    cols = [lo[:, None] * q ** np.arange(nmax + 1)[None, :]]
    if len(kernel.breaks):
        cols.append(np.broadcast_to(kernel.breaks, (m, len(kernel.breaks))))
    if extra is not None:
        cols.append(np.asarray(extra, dtype=float).reshape(m, -1))
    cols.append(hi[:, None])
    edges = np.sort(np.clip(np.concatenate(cols, axis=1), lo[:, None], hi[:, None]), axis=1)
    a, b = edges[:, :-1], edges[:, 1:]
    keep = b > a * (1 + 1e-15)
    ray = np.broadcast_to(np.arange(m)[:, None], a.shape)[keep]
    a, b = a[keep], b[keep]
    xi, wg = _gauss(quad.n_gauss)
    half = 0.5 * (b - a)
    r = (a + half)[:, None] + half[:, None] * xi[None, :]
    w = half[:, None] * wg[None, :]
    ray = np.repeat(ray, quad.n_gauss)
    r = r.ravel()
    w = w.ravel()
    z = r[:, None] * thetas[ray]
    if kernel.is_radial:
        kz = kernel.radial(r)
    else:
        kz = kernel.K(z)
    w = wtheta[ray] * w * kz * r ** (-1.0 - kernel.alpha)
    nz = w != 0
    x = np.asarray(x, dtype=float).reshape(1, -1)
    return x + z[nz], w[nz], ray[nz]


def _exit_grading(lo, hi, levels: int):
    if levels <= 0:
        return None
    j = np.arange(1, levels + 1)
    return hi[:, None] - (hi - lo)[:, None] * 0.5 ** j[None, :]


@dataclass
class NodeRule:
    """Quadrature data of one evaluation point.

    cen_*   censored rays [delta, r_exit]
    inn_*   secant model of the ball B_delta: weight m1/delta at x + delta theta
    ext_*   exterior rays [r_exit, R_inf] plus one far point per ray carrying
            the mass beyond R_inf
    """

    x: np.ndarray
    delta: float
    thetas: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    cen_pts: np.ndarray
    cen_w: np.ndarray
    inn_pts: np.ndarray
    inn_w: np.ndarray
    ext_pts: np.ndarray
    ext_w: np.ndarray
    tail: float
    tail_width: float = 0.0


def inner_moments(kernel: LevyKernel, quad: QuadratureSpec, delta: float, thetas, wtheta):
    """m1 = w int_0^delta K r^{-alpha} dr and m2 = w int_0^delta K r^{1-alpha} dr per direction."""
    a = kernel.alpha
    if kernel.is_radial:
        m1 = wtheta * kernel.power_integral(0.0, delta, -a)
        m2 = wtheta * kernel.power_integral(0.0, delta, 1.0 - a)
        return m1, m2
    # graded panels (ratio 2) down to delta 2^-L, then K frozen on the last ball
    L = quad.inner_levels
    edges = delta * 0.5 ** np.arange(L, -1, -1)
    xi, wg = _gauss(quad.n_gauss)
    half = 0.5 * np.diff(edges)
    r = ((edges[:-1] + half)[:, None] + half[:, None] * xi).ravel()
    w = (half[:, None] * wg).ravel()
    m1 = np.empty(len(thetas))
    m2 = np.empty(len(thetas))
    r0 = edges[0]
    for k, th in enumerate(thetas):
        kz = kernel.K(r[:, None] * th[None, :])
        k0 = kernel.K((0.5 * r0) * th[None, :])[0]
        m1[k] = wtheta[k] * (np.sum(w * kz * r ** (-a)) + k0 * r0 ** (1 - a) / (1 - a))
        m2[k] = wtheta[k] * (np.sum(w * kz * r ** (1 - a)) + k0 * r0 ** (2 - a) / (2 - a))
    return m1, m2


def _tail_per_ray(kernel, quad, x, thetas, wtheta, r_exit, R, extra=None):
    """Exterior rays: points/weights on [r_exit, R], far weights beyond R, bracket width."""
    a = kernel.alpha
    pts, w, ray = _ray_rule(kernel, quad, x, thetas, wtheta, r_exit, np.full(len(thetas), R), extra)
    far_pts = np.asarray(x, dtype=float).reshape(1, -1) + R * thetas
    width = 0.0
    use_closed = kernel.is_radial and quad.tail_mode in ("auto", "closed_form_constant_K")
    if use_closed:
        # renormalise ray sums to the closed form so constants integrate exactly
        exact = wtheta * kernel.power_integral(r_exit, R, -1.0 - a)
        got = np.bincount(ray, weights=w, minlength=len(thetas))
        scale = np.where(got > 0, exact / np.where(got > 0, got, 1.0), 0.0)
        w = w * scale[ray]
        far_w = wtheta * kernel.power_integral(R, np.inf, -1.0 - a)
    else:
        upper = wtheta * kernel.Lambda * R ** (-a) / a
        far_w = 0.5 * upper
        width = float(np.sum(upper))
    return pts, w, far_pts, far_w, width


def node_rule(domain: Domain, kernel: LevyKernel, quad: QuadratureSpec, x, delta: float,
              breaks=None, exterior: bool = True) -> NodeRule:
    """Assemble the quadrature of one point ``x`` with inner radius ``delta``.

    ``breaks``: extra panel edges given as points in space (1D only), e.g. the
    grid nodes for a piecewise-linear integrand or a kink of the integrand.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    d = float(domain.signed_distance(x if domain.dim > 1 else x[0]))
    if not d > 0:
        raise ValueError("evaluation point must lie inside the domain")
    if not 0 < delta <= d * (1 + 1e-12):
        raise ValueError(f"inner radius delta = {delta:.3g} must lie in (0, d(x) = {d:.3g}]")
    thetas, wtheta = directions(domain.dim, quad.n_angles)
    r_exit = domain.exit_distance(x, thetas)
    lo = np.full(len(thetas), delta)
    kinks = None
    if breaks is not None and domain.dim == 1:
        bp = np.asarray(breaks, dtype=float).reshape(-1)
        kinks = np.vstack([bp - x[0], x[0] - bp])
    extra = kinks
    grading = _exit_grading(lo, r_exit, quad.exit_levels)
    if grading is not None:
        extra = grading if extra is None else np.hstack([extra, grading])
    cen_pts, cen_w, _ = _ray_rule(kernel, quad, x, thetas, wtheta, lo, r_exit, extra)
    m1, m2 = inner_moments(kernel, quad, delta, thetas, wtheta)
    inn_pts = x[None, :] + delta * thetas
    inn_w = m1 / delta
    if exterior:
        R = quad.R_inf(domain)
        ext_pts, ext_w, far_pts, far_w, width = _tail_per_ray(kernel, quad, x, thetas, wtheta, r_exit, R, kinks)
        ext_pts = np.vstack([ext_pts, far_pts])
        ext_w = np.concatenate([ext_w, far_w])
        tail = float(np.sum(ext_w))
    else:
        ext_pts, ext_w, tail, width = np.empty((0, domain.dim)), np.empty(0), np.nan, 0.0
    return NodeRule(x, delta, thetas, m1, m2, cen_pts, cen_w, inn_pts, inn_w, ext_pts, ext_w, tail, width)


def _tail_closed(kernel, domain, x, n_angles):
    thetas, wtheta = directions(domain.dim, n_angles)
    r_exit = domain.exit_distance(np.asarray(x, dtype=float).reshape(-1), thetas)
    return float(np.sum(wtheta * kernel.power_integral(r_exit, np.inf, -1.0 - kernel.alpha)))


def tail_mass(kernel: LevyKernel, domain: Domain, x, quad: Optional[QuadratureSpec] = None,
              with_width: bool = False):
    """Jump intensity out of the domain, int_{x+z outside} K^alpha(z) dz."""
    quad = quad or QuadratureSpec()
    x = np.asarray(x, dtype=float).reshape(-1)
    if kernel.is_radial and quad.tail_mode in ("auto", "closed_form_constant_K"):
        val, width = _tail_closed(kernel, domain, x, quad.n_angles), 0.0
    else:
        thetas, wtheta = directions(domain.dim, quad.n_angles)
        r_exit = domain.exit_distance(x, thetas)
        _, w, _, far_w, width = _tail_per_ray(kernel, quad, x, thetas, wtheta, r_exit, quad.R_inf(domain))
        val = float(np.sum(w) + np.sum(far_w))
    return (val, width) if with_width else val


def lambda_bar(problem, kernel: LevyKernel, domain: Domain, x, quad: Optional[QuadratureSpec] = None) -> float:
    return problem.lam + tail_mass(kernel, domain, x, quad)


def phi_bar(problem, kernel: LevyKernel, domain: Domain, x, quad: Optional[QuadratureSpec] = None) -> float:
    """int_{x+z outside} phi(x+z) K^alpha(z) dz."""
    quad = quad or QuadratureSpec()
    x = np.asarray(x, dtype=float).reshape(-1)
    d = float(domain.signed_distance(x if domain.dim > 1 else x[0]))
    rule = node_rule(domain, kernel, quad, x, d)
    phi = problem.phi if hasattr(problem, "phi") else problem
    return float(np.sum(rule.ext_w * phi(rule.ext_pts)))


@dataclass
class Mu0Report:
    mu0: float
    argmin: int
    violated: bool

    def __iter__(self):
        yield self.mu0
        yield self.violated


def mu0_estimate(problem, kernel: LevyKernel, domain: Domain, grid, quad: Optional[QuadratureSpec] = None) -> Mu0Report:
    """lambda + min over grid nodes of the tail mass; flags (M) failing when not positive."""
    quad = quad or QuadratureSpec()
    nodes = grid.nodes if hasattr(grid, "nodes") else as_points(grid, domain.dim)
    if len(nodes) == 0:
        raise ValueError("grid is empty")
    tails = np.array([tail_mass(kernel, domain, p, quad) for p in nodes])
    k = int(np.argmin(tails))
    mu0 = problem.lam + float(tails[k])
    return Mu0Report(mu0, k, not mu0 > 0)


@dataclass
class LocalModel:
    """Quadratic model q(y) = value + grad.(y-x) + (y-x).hess.(y-x)/2 around x."""

    value: float
    grad: np.ndarray
    hess: np.ndarray

    def __post_init__(self):
        self.grad = np.atleast_1d(np.asarray(self.grad, dtype=float))
        n = self.grad.shape[0]
        self.hess = np.asarray(self.hess, dtype=float).reshape(n, n)


def _inner_value(rule: NodeRule, model: Optional[LocalModel], u, ux: float) -> float:
    if model is None:
        return float(np.sum(rule.inn_w * (u(rule.inn_pts) - ux)))
    lin = rule.thetas @ model.grad
    quad = np.einsum("ki,ij,kj->k", rule.thetas, model.hess, rule.thetas)
    return float(np.sum(lin * rule.m1 + 0.5 * quad * rule.m2))


def _resolve(u, x, dim):
    from .grid import GridFunction

    if isinstance(u, GridFunction):
        inside = u.inside
        exterior = u.exterior
        ux = float(u.inside(x.reshape(1, -1))[0])
        breaks = u.grid.nodes[:, 0] if dim == 1 else None
    else:
        inside = exterior = u
        ux = float(np.asarray(u(x.reshape(1, -1))).reshape(-1)[0])
        breaks = None
    return inside, exterior, ux, breaks


def apply_censored(u, kernel: LevyKernel, domain: Domain, x, delta: float,
                   local_model: Optional[LocalModel] = None, quad: Optional[QuadratureSpec] = None,
                   breaks=None) -> float:
    """I_Omega[u](x): jumps restricted to the closure of the domain.

    ``u`` is a GridFunction or a callable on points.  The ball B_delta uses
    ``local_model`` when given and the secant model along each ray otherwise.
    The exterior datum is never read.
    """
    quad = quad or QuadratureSpec()
    x = np.asarray(x, dtype=float).reshape(-1)
    inside, _, ux, auto_breaks = _resolve(u, x, domain.dim)
    rule = node_rule(domain, kernel, quad, x, delta, breaks if breaks is not None else auto_breaks, exterior=False)
    outer = float(np.sum(rule.cen_w * (inside(rule.cen_pts) - ux)))
    return outer + _inner_value(rule, local_model, inside, ux)


def apply_split(u, kernel: LevyKernel, domain: Domain, x, delta: float,
                local_model: Optional[LocalModel] = None, quad: Optional[QuadratureSpec] = None,
                breaks=None, exterior: Optional[Callable] = None) -> float:
    """I[u](x) over all jumps: censored part plus jumps landing outside, where u = phi."""
    quad = quad or QuadratureSpec()
    x = np.asarray(x, dtype=float).reshape(-1)
    inside, ext, ux, auto_breaks = _resolve(u, x, domain.dim)
    ext = exterior or ext
    if ext is None:
        raise ValueError("exterior datum required for the full operator")
    rule = node_rule(domain, kernel, quad, x, delta, breaks if breaks is not None else auto_breaks)
    outer = float(np.sum(rule.cen_w * (inside(rule.cen_pts) - ux)))
    far = float(np.sum(rule.ext_w * (np.asarray(ext(rule.ext_pts)) - ux)))
    return outer + far + _inner_value(rule, local_model, inside, ux)
