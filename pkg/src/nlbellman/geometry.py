"""Bounded smooth domains, signed distance, and boundary classification.

Only shapes with an exactly computable signed distance are supported:
intervals in 1D, disks and ellipses in 2D.  All of them are convex, so
every ray leaving an interior point crosses the boundary exactly once,
which the quadrature in :mod:`nlbellman.kernel` relies on.

Sign convention: ``d > 0`` inside, ``d < 0`` outside and ``Dd`` is the
inward unit normal near the boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "Domain",
    "Interval",
    "Disk",
    "Ellipse",
    "OutOfBandError",
    "InfeasibleConeError",
    "BoundaryClassification",
    "ConeSpec",
    "as_points",
    "signed_distance",
    "distance_gradient",
    "classify_boundary",
    "check_assumption_H",
    "cone_points",
    "domain_from_config",
]

LABELS = ("In", "Out", "Mixed")


class OutOfBandError(ValueError):
    """Raised when the distance gradient is requested outside |d| < delta0."""


class InfeasibleConeError(ValueError):
    """Raised when a cone cannot satisfy d(x) >= C |x - x0|."""


def as_points(x, dim: int) -> np.ndarray:
    """Return ``x`` as a float array of shape ``(m, dim)``."""
    p = np.asarray(x, dtype=float)
    if dim == 1:
        if p.ndim == 0:
            return p.reshape(1, 1)
        if p.ndim == 1:
            return p.reshape(-1, 1)
        return p.reshape(-1, 1)
    if p.ndim == 1:
        return p.reshape(1, dim)
    return p.reshape(-1, dim)


def _single(x, dim: int) -> bool:
    p = np.asarray(x)
    return p.ndim == 0 or (p.ndim == 1 and dim > 1)


class Domain:
    """Base class for the supported shapes."""

    dim: int
    delta0: float
    closed_boundary: bool

    # -- to be provided by subclasses -------------------------------------
    def _distance(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _gradient(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def exit_distance(self, x: np.ndarray, directions: np.ndarray) -> np.ndarray:
        """Distance from interior point ``x`` to the boundary along each unit direction."""
        raise NotImplementedError

    def boundary_samples(self, n: int) -> np.ndarray:
        raise NotImplementedError

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def to_config(self) -> dict:
        raise NotImplementedError

    # -- shared -----------------------------------------------------------
    @property
    def diameter(self) -> float:
        lo, hi = self.bounding_box()
        return float(np.linalg.norm(hi - lo))

    def signed_distance(self, x):
        p = as_points(x, self.dim)
        d = self._distance(p)
        return float(d[0]) if _single(x, self.dim) else d

    def distance_gradient(self, x, check: bool = True):
        p = as_points(x, self.dim)
        if check:
            d = self._distance(p)
            if np.any(np.abs(d) >= self.delta0):
                raise OutOfBandError(
                    f"|d(x)| = {np.max(np.abs(d)):.3g} outside the smooth band delta0 = {self.delta0:.3g}"
                )
        g = self._gradient(p)
        if _single(x, self.dim):
            return float(g[0, 0]) if self.dim == 1 else g[0]
        return g

    def distance_hessian(self, x) -> np.ndarray:
        """Hessian of d at the points ``x`` (shape ``(m, dim, dim)``)."""
        p = as_points(x, self.dim)
        eps = 1e-5 * max(self.diameter, 1.0)
        hess = np.empty((p.shape[0], self.dim, self.dim))
        for k in range(self.dim):
            e = np.zeros(self.dim)
            e[k] = eps
            hess[:, :, k] = (self._gradient(p + e) - self._gradient(p - e)) / (2 * eps)
        return 0.5 * (hess + np.swapaxes(hess, 1, 2))

    def contains(self, x, closed: bool = False):
        d = self.signed_distance(x)
        return d >= 0 if closed else d > 0


@dataclass(frozen=True)
class Interval(Domain):
    a: float = 0.0
    b: float = 1.0
    delta0: float = field(default=None)  # type: ignore[assignment]

    dim = 1
    closed_boundary = False

    def __post_init__(self):
        if not self.b > self.a:
            raise ValueError("interval requires a < b")
        if self.delta0 is None:
            object.__setattr__(self, "delta0", 0.5 * (self.b - self.a))

    def _distance(self, p):
        x = p[:, 0]
        return np.minimum(x - self.a, self.b - x)

    def _gradient(self, p):
        x = p[:, 0]
        return np.where(x - self.a <= self.b - x, 1.0, -1.0).reshape(-1, 1)

    def distance_hessian(self, x):
        return np.zeros((as_points(x, 1).shape[0], 1, 1))

    def exit_distance(self, x, directions):
        x = float(np.ravel(x)[0])
        s = np.asarray(directions, dtype=float).reshape(-1)
        return np.where(s > 0, self.b - x, x - self.a)

    def boundary_samples(self, n: int = 2) -> np.ndarray:
        return np.array([[self.a], [self.b]])

    def bounding_box(self):
        return np.array([self.a]), np.array([self.b])

    def to_config(self) -> dict:
        return {"kind": "interval", "params": {"a": self.a, "b": self.b}}


@dataclass(frozen=True)
class Disk(Domain):
    center: tuple = (0.0, 0.0)
    radius: float = 1.0
    delta0: float = field(default=None)  # type: ignore[assignment]

    dim = 2
    closed_boundary = True

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if self.delta0 is None:
            object.__setattr__(self, "delta0", float(self.radius))

    def _distance(self, p):
        return self.radius - np.linalg.norm(p - np.asarray(self.center), axis=1)

    def _gradient(self, p):
        q = p - np.asarray(self.center)
        r = np.linalg.norm(q, axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return -q / r

    def distance_hessian(self, x):
        p = as_points(x, 2) - np.asarray(self.center)
        r = np.linalg.norm(p, axis=1)
        n = p / r[:, None]
        eye = np.eye(2)[None]
        return -(eye - n[:, :, None] * n[:, None, :]) / r[:, None, None]

    def exit_distance(self, x, directions):
        p = np.asarray(x, dtype=float).reshape(2) - np.asarray(self.center)
        th = np.asarray(directions, dtype=float).reshape(-1, 2)
        pb = th @ p
        c = p @ p - self.radius**2
        return -pb + np.sqrt(np.maximum(pb * pb - c, 0.0))

    def boundary_samples(self, n: int = 64) -> np.ndarray:
        t = 2 * np.pi * np.arange(n) / n
        return np.asarray(self.center) + self.radius * np.column_stack([np.cos(t), np.sin(t)])

    def bounding_box(self):
        c = np.asarray(self.center)
        return c - self.radius, c + self.radius

    def to_config(self) -> dict:
        return {"kind": "disk", "params": {"center": list(self.center), "radius": self.radius}}


def _ellipse_project_quadrant(y0, y1, e0, e1, iters: int = 200):
    """Closest point on x0^2/e0^2 + x1^2/e1^2 = 1 for points in the closed first quadrant.

    Requires e0 >= e1.  Follows the bisection formulation of the stationarity
    condition, which is robust for points on either side of the curve.
    """
    y0 = np.asarray(y0, dtype=float)
    y1 = np.asarray(y1, dtype=float)
    x0 = np.empty_like(y0)
    x1 = np.empty_like(y1)

    # coordinates this close to an axis go to the axis branches (the bisection
    # would divide by s + 1 = 0 in floating point); the error is O(1e-13)
    pos1 = y1 > 1e-13 * e1
    pos0 = y0 > 1e-13 * e0
    generic = pos0 & pos1
    if np.any(generic):
        z0 = y0[generic] / e0
        z1 = y1[generic] / e1
        g = z0 * z0 + z1 * z1 - 1.0
        r0 = (e0 / e1) ** 2
        lo = np.where(g < 0, z1 - 1.0, 0.0)
        hi = np.where(g < 0, 0.0, np.hypot(r0 * z0, z1) - 1.0)
        for _ in range(iters):
            s = 0.5 * (lo + hi)
            n0 = r0 * z0 / (s + r0)
            n1 = z1 / (s + 1.0)
            val = n0 * n0 + n1 * n1 - 1.0
            lo = np.where(val > 0, s, lo)
            hi = np.where(val > 0, hi, s)
        s = 0.5 * (lo + hi)
        x0[generic] = r0 * y0[generic] / (s + r0)
        x1[generic] = y1[generic] / (s + 1.0)
        # points exactly on the curve
        on = np.abs(g) == 0
        if np.any(on):
            idx = np.flatnonzero(generic)[on]
            x0[idx] = y0[idx]
            x1[idx] = y1[idx]

    axis1 = ~pos0 & pos1
    x0[axis1] = 0.0
    x1[axis1] = e1

    axis0 = ~pos1
    if np.any(axis0):
        yy = y0[axis0]
        numer0 = e0 * yy
        denom0 = e0 * e0 - e1 * e1
        inside_branch = (denom0 > 0) & (numer0 < denom0)
        xa = np.where(inside_branch, e0 * numer0 / np.where(denom0 > 0, denom0, 1.0), e0)
        xb = np.where(inside_branch, e1 * np.sqrt(np.maximum(1 - (xa / e0) ** 2, 0.0)), 0.0)
        x0[axis0] = xa
        x1[axis0] = xb
    return x0, x1


@dataclass(frozen=True)
class Ellipse(Domain):
    center: tuple = (0.0, 0.0)
    semi_axes: tuple = (2.0, 1.0)
    delta0: float = field(default=None)  # type: ignore[assignment]

    dim = 2
    closed_boundary = True

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "semi_axes", tuple(float(c) for c in self.semi_axes))
        a, b = self.semi_axes
        if a <= 0 or b <= 0:
            raise ValueError("semi-axes must be positive")
        if self.delta0 is None:
            # smallest radius of curvature bounds the band where d is smooth inside
            lo, hi = min(a, b), max(a, b)
            object.__setattr__(self, "delta0", lo * lo / hi)

    def project(self, x) -> np.ndarray:
        """Nearest boundary point for each row of ``x``."""
        p = as_points(x, 2) - np.asarray(self.center)
        a, b = self.semi_axes
        swap = b > a
        if swap:
            p = p[:, ::-1]
            a, b = b, a
        s0 = np.sign(p[:, 0])
        s1 = np.sign(p[:, 1])
        s0[s0 == 0] = 1.0
        s1[s1 == 0] = 1.0
        x0, x1 = _ellipse_project_quadrant(np.abs(p[:, 0]), np.abs(p[:, 1]), a, b)
        q = np.column_stack([s0 * x0, s1 * x1])
        if swap:
            q = q[:, ::-1]
        return q + np.asarray(self.center)

    def _level(self, p):
        q = p - np.asarray(self.center)
        a, b = self.semi_axes
        return (q[:, 0] / a) ** 2 + (q[:, 1] / b) ** 2

    def _distance(self, p):
        q = self.project(p)
        dist = np.linalg.norm(p - q, axis=1)
        return np.where(self._level(p) <= 1.0, dist, -dist)

    def _normal(self, q):
        c = q - np.asarray(self.center)
        a, b = self.semi_axes
        n = -np.column_stack([c[:, 0] / a**2, c[:, 1] / b**2])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def _gradient(self, p):
        q = self.project(p)
        v = p - q
        dist = np.linalg.norm(v, axis=1, keepdims=True)
        inside = self._level(p) <= 1.0
        with np.errstate(invalid="ignore", divide="ignore"):
            g = np.where(inside[:, None], v / dist, -v / dist)
        tiny = dist[:, 0] < 1e-10 * max(self.semi_axes)
        if np.any(tiny):
            g[tiny] = self._normal(q[tiny])
        return g

    def exit_distance(self, x, directions):
        p = np.asarray(x, dtype=float).reshape(2) - np.asarray(self.center)
        th = np.asarray(directions, dtype=float).reshape(-1, 2)
        a, b = self.semi_axes
        A = th[:, 0] ** 2 / a**2 + th[:, 1] ** 2 / b**2
        B = 2 * (p[0] * th[:, 0] / a**2 + p[1] * th[:, 1] / b**2)
        C = p[0] ** 2 / a**2 + p[1] ** 2 / b**2 - 1.0
        return (-B + np.sqrt(np.maximum(B * B - 4 * A * C, 0.0))) / (2 * A)

    def boundary_samples(self, n: int = 64) -> np.ndarray:
        t = 2 * np.pi * np.arange(n) / n
        a, b = self.semi_axes
        return np.asarray(self.center) + np.column_stack([a * np.cos(t), b * np.sin(t)])

    def bounding_box(self):
        c = np.asarray(self.center)
        ax = np.asarray(self.semi_axes)
        return c - ax, c + ax

    def to_config(self) -> dict:
        return {"kind": "ellipse", "params": {"center": list(self.center), "semi_axes": list(self.semi_axes)}}


def domain_from_config(block: dict) -> Domain:
    kind = block["kind"]
    params = dict(block.get("params", {}))
    if "delta0" in block:
        params["delta0"] = block["delta0"]
    if kind == "interval":
        return Interval(**params)
    if kind == "disk":
        return Disk(**params)
    if kind == "ellipse":
        return Ellipse(**params)
    raise ValueError(f"unknown domain kind {kind!r}")


def signed_distance(domain: Domain, x):
    return domain.signed_distance(x)


def distance_gradient(domain: Domain, x):
    return domain.distance_gradient(x)


# --------------------------------------------------------------------------
# boundary classification


@dataclass
class BoundaryClassification:
    samples: np.ndarray
    labels: list
    min_product: np.ndarray
    max_product: np.ndarray
    components: list  # [(label, [sample indices]), ...]
    closed: bool
    tau: float

    def indices(self, label: str) -> np.ndarray:
        return np.array([i for i, lab in enumerate(self.labels) if lab == label], dtype=int)

    def has(self, label: str) -> bool:
        return label in self.labels

    def rows(self):
        for i, p in enumerate(self.samples):
            yield [i, *[float(c) for c in p], self.labels[i], float(self.min_product[i]), float(self.max_product[i])]

    def header(self, dim: int):
        coords = ["x"] if dim == 1 else [f"x{k}" for k in range(dim)]
        return ["sample_index", *coords, "label", "min_product", "max_product"]


def _runs(labels: Sequence[str], closed: bool) -> list:
    n = len(labels)
    if n == 0:
        return []
    if not closed:
        # disconnected boundary points (1D): every sample is its own component
        return [(labels[i], [i]) for i in range(n)]
    runs = []
    start = 0
    for i in range(1, n + 1):
        if i == n or labels[i] != labels[start]:
            runs.append((labels[start], list(range(start, i))))
            start = i
    if len(runs) > 1 and runs[0][0] == runs[-1][0]:
        first = runs.pop(0)
        runs[-1] = (runs[-1][0], runs[-1][1] + first[1])
    return runs


def classify_boundary(domain: Domain, problem, n_samples: int = 64, tau: float = 1e-8) -> BoundaryClassification:
    """Label boundary samples by the sign of ``b_beta . Dd`` over all controls.

    ``In``: every control pushes strictly inward (product > tau).
    ``Out``: every control points outward or tangentially (product <= tau).
    ``Mixed``: anything else.
    """
    if n_samples < 4 and domain.dim > 1:
        raise ValueError("n_samples must be at least 4")
    if len(problem.controls) == 0:
        raise ValueError("control set is empty")
    pts = domain.boundary_samples(n_samples)
    normals = domain.distance_gradient(pts, check=False).reshape(len(pts), domain.dim)
    products = np.stack([np.sum(problem.drift(pts, k) * normals, axis=1) for k in range(len(problem.controls))])
    lo = products.min(axis=0)
    hi = products.max(axis=0)
    labels = ["In" if l > tau else ("Out" if h <= tau else "Mixed") for l, h in zip(lo, hi)]
    return BoundaryClassification(
        samples=pts,
        labels=labels,
        min_product=lo,
        max_product=hi,
        components=_runs(labels, domain.closed_boundary),
        closed=domain.closed_boundary,
        tau=tau,
    )


def check_assumption_H(classification: BoundaryClassification) -> tuple[bool, dict]:
    """Check that each label occupies a single arc of the sampled boundary.

    On a closed curve a label split over several arcs means the sampled
    sets interleave, which is what the connectedness hypothesis forbids.
    Isolated boundary points (1D) are separate components and always pass.
    """
    report: dict = {"arcs": {}, "violations": []}
    for label, idx in classification.components:
        report["arcs"].setdefault(label, []).append(idx)
    if classification.closed:
        for label, arcs in report["arcs"].items():
            if len(arcs) > 1:
                report["violations"].append({"label": label, "arcs": arcs})
    return (len(report["violations"]) == 0, report)


# --------------------------------------------------------------------------
# cones


@dataclass
class ConeSpec:
    vertex: np.ndarray
    C: float = 0.5
    direction: Optional[np.ndarray] = None
    ratio: float = 0.5
    t0: Optional[float] = None

    def __post_init__(self):
        self.vertex = np.asarray(self.vertex, dtype=float).reshape(-1)
        if self.direction is not None:
            v = np.asarray(self.direction, dtype=float).reshape(-1)
            self.direction = v / np.linalg.norm(v)
        if not 0 < self.C <= 1:
            raise ValueError("aperture constant must lie in (0, 1]")
        if not 0 < self.ratio < 1:
            raise ValueError("ratio must lie in (0, 1)")


def cone_points(domain: Domain, spec: ConeSpec, k: int) -> np.ndarray:
    """Points ``x0 + t_j * direction`` with geometric ``t_j = t0 * ratio**j``."""
    x0 = spec.vertex
    if abs(domain.signed_distance(x0 if domain.dim > 1 else x0[0])) > 1e-9 * max(domain.diameter, 1.0):
        raise ValueError("cone vertex must lie on the boundary")
    normal = np.asarray(domain.distance_gradient(x0.reshape(1, -1), check=False)).reshape(-1)
    direction = normal if spec.direction is None else spec.direction
    if float(direction @ normal) < spec.C - 1e-12:
        raise InfeasibleConeError(
            f"direction . Dd(x0) = {float(direction @ normal):.3g} is below the aperture constant {spec.C}"
        )
    t0 = spec.t0 if spec.t0 is not None else 0.5 * domain.delta0
    t = t0 * spec.ratio ** np.arange(k)
    pts = x0[None, :] + t[:, None] * direction[None, :]
    d = np.atleast_1d(domain.signed_distance(pts))
    if np.any(d < spec.C * t * (1 - 1e-12)):
        raise InfeasibleConeError("cone leaves the admissible region; reduce t0")
    return pts
