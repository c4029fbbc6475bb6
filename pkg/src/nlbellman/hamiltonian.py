"""Bellman Hamiltonian over a finite control list, and the problem data around it.

    H(x, p) = max_k { -b_k(x) . p - f_k(x) }

Drifts are affine, ``b_k(x) = A_k x + c_k``, costs are polynomials of degree
at most two.  The exterior datum ``phi`` is a bounded continuous function
given by one of a few built-ins or by a user callable.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .geometry import as_points

__all__ = [
    "Control",
    "ControlProblem",
    "ExteriorDatum",
    "H",
    "H_envelopes",
    "argmax_control",
    "exterior_from_config",
]


def _poly_cost(coeffs: Sequence[float], p: np.ndarray) -> np.ndarray:
    c = list(coeffs) if coeffs is not None else [0.0]
    if p.shape[1] == 1:
        x = p[:, 0]
        out = np.zeros(len(p))
        for k, ck in enumerate(c):
            out += ck * x**k
        return out
    # 2D: [c0, cx, cy, cxx, cxy, cyy]
    x, y = p[:, 0], p[:, 1]
    basis = [np.ones_like(x), x, y, x * x, x * y, y * y]
    if len(c) > len(basis):
        raise ValueError("2D costs take at most six coefficients (total degree two)")
    out = np.zeros(len(p))
    for ck, m in zip(c, basis):
        out += ck * m
    return out


@dataclass
class Control:
    """One element of the control set: affine drift and polynomial cost."""

    A: np.ndarray
    c: np.ndarray
    f_coeffs: list = field(default_factory=lambda: [0.0])
    label: str = ""

    def __post_init__(self):
        self.c = np.atleast_1d(np.asarray(self.c, dtype=float))
        n = self.c.shape[0]
        self.A = np.asarray(self.A, dtype=float).reshape(n, n)
        self.f_coeffs = [float(v) for v in (self.f_coeffs or [0.0])]

    def drift(self, p: np.ndarray) -> np.ndarray:
        return p @ self.A.T + self.c

    def cost(self, p: np.ndarray) -> np.ndarray:
        return _poly_cost(self.f_coeffs, p)

    def to_config(self) -> dict:
        return {"A": self.A.tolist(), "c": self.c.tolist(), "f_coeffs": list(self.f_coeffs), "label": self.label}


class ExteriorDatum:
    """Bounded continuous exterior data phi with a known sup-norm.

    Built-ins:
      constant  phi = value
      table     piecewise linear in one coordinate (``axis``), constant
                beyond the outer knots
      cosine    amplitude * cos(freq * x[axis] + shift) + offset
    """

    def __init__(self, func: Callable, sup: float, spec: Optional[dict] = None):
        self._func = func
        self.sup = float(sup)
        self.spec = spec

    def __call__(self, x) -> np.ndarray:
        return np.asarray(self._func(x), dtype=float)

    @classmethod
    def constant(cls, value: float, dim: int = 1):
        v = float(value)
        return cls(lambda x: np.full(len(as_points(x, dim)), v), abs(v), {"kind": "constant", "value": v})

    @classmethod
    def table(cls, knots, values, axis: int = 0, dim: int = 1):
        xs = np.asarray(knots, dtype=float)
        vs = np.asarray(values, dtype=float)
        if xs.shape != vs.shape or xs.size < 1 or np.any(np.diff(xs) <= 0):
            raise ValueError("table needs strictly increasing knots and matching values")

        def f(x):
            return np.interp(as_points(x, dim)[:, axis], xs, vs)

        spec = {"kind": "table", "knots": xs.tolist(), "values": vs.tolist(), "axis": axis}
        return cls(f, float(np.max(np.abs(vs))), spec)

    @classmethod
    def cosine(cls, amplitude=1.0, freq=1.0, shift=0.0, offset=0.0, axis: int = 0, dim: int = 1):
        def f(x):
            return amplitude * np.cos(freq * as_points(x, dim)[:, axis] + shift) + offset

        spec = {"kind": "cosine", "amplitude": amplitude, "freq": freq, "shift": shift, "offset": offset, "axis": axis}
        return cls(f, abs(amplitude) + abs(offset), spec)

    def scaled(self, t: float, shift: float = 0.0) -> "ExteriorDatum":
        f = self._func
        return ExteriorDatum(lambda x: t * np.asarray(f(x)) + shift, abs(t) * self.sup + abs(shift))

    def to_config(self) -> dict:
        if self.spec is None:
            raise ValueError("callable exterior data cannot be serialized")
        return dict(self.spec)


def exterior_from_config(block, dim: int) -> ExteriorDatum:
    if isinstance(block, (int, float)):
        return ExteriorDatum.constant(block, dim)
    kind = block.get("kind", "constant")
    if kind == "constant":
        return ExteriorDatum.constant(block.get("value", 0.0), dim)
    if kind == "table":
        return ExteriorDatum.table(block["knots"], block["values"], block.get("axis", 0), dim)
    if kind == "cosine":
        keys = ("amplitude", "freq", "shift", "offset", "axis")
        return ExteriorDatum.cosine(**{k: block[k] for k in keys if k in block}, dim=dim)
    raise ValueError(f"unknown exterior datum {kind!r}")


class ControlProblem:
    """Finite control set, discount lambda and exterior datum phi."""

    def __init__(self, controls: Sequence[Control], lam: float, phi: ExteriorDatum, dim: int = 1):
        if len(controls) == 0:
            raise ValueError("control set is empty")
        if lam < 0:
            raise ValueError("discount must be nonnegative")
        self.controls = list(controls)
        for k, ctl in enumerate(self.controls):
            if not ctl.label:
                ctl.label = f"b{k}"
            if ctl.c.shape[0] != dim:
                raise ValueError("drift dimension does not match the domain")
        self.lam = float(lam)
        self.phi = phi
        self.dim = dim

    @property
    def labels(self) -> list:
        return [c.label for c in self.controls]

    @property
    def m(self) -> int:
        return len(self.controls)

    @property
    def L(self) -> float:
        """Lipschitz constant of the drifts (largest operator norm of A_k)."""
        return max(float(np.linalg.norm(c.A, 2)) for c in self.controls)

    def drift(self, x, k: int) -> np.ndarray:
        return self.controls[k].drift(as_points(x, self.dim))

    def cost(self, x, k: int) -> np.ndarray:
        return self.controls[k].cost(as_points(x, self.dim))

    def drifts(self, x) -> np.ndarray:
        """Array of shape (m, npts, dim)."""
        p = as_points(x, self.dim)
        return np.stack([c.drift(p) for c in self.controls])

    def costs(self, x) -> np.ndarray:
        p = as_points(x, self.dim)
        return np.stack([c.cost(p) for c in self.controls])

    def f_sup(self, x) -> float:
        return float(np.max(np.abs(self.costs(x))))

    def with_phi(self, phi: ExteriorDatum) -> "ControlProblem":
        return ControlProblem(self.controls, self.lam, phi, self.dim)

    def with_costs(self, coeffs: Sequence[Sequence[float]]) -> "ControlProblem":
        ctl = [Control(c.A, c.c, list(f), c.label) for c, f in zip(self.controls, coeffs)]
        return ControlProblem(ctl, self.lam, self.phi, self.dim)

    def restrict(self, k: int) -> "ControlProblem":
        """Single-control problem frozen at control ``k``."""
        c = self.controls[k]
        return ControlProblem([Control(c.A, c.c, c.f_coeffs, c.label)], self.lam, self.phi, self.dim)


def _affine_forms(problem: ControlProblem, x, p):
    pts = as_points(x, problem.dim)
    pv = as_points(p, problem.dim)
    if len(pv) == 1 and len(pts) > 1:
        pv = np.repeat(pv, len(pts), axis=0)
    if len(pts) == 1 and len(pv) > 1:
        pts = np.repeat(pts, len(pv), axis=0)
    lin = -np.einsum("kmd,md->km", problem.drifts(pts), pv)
    return lin, problem.costs(pts)


def _scalar(x, dim, arr):
    single = np.asarray(x).ndim == 0 or (np.asarray(x).ndim == 1 and dim > 1)
    return arr[0] if single else arr


def H(problem: ControlProblem, x, p):
    lin, f = _affine_forms(problem, x, p)
    return _scalar(x, problem.dim, np.max(lin - f, axis=0))


def H_envelopes(problem: ControlProblem, x, p):
    """(H_i, H_s): inf and sup over controls of -b . p."""
    lin, _ = _affine_forms(problem, x, p)
    return _scalar(x, problem.dim, lin.min(axis=0)), _scalar(x, problem.dim, lin.max(axis=0))


def argmax_control(problem: ControlProblem, x, p):
    """Index of the first control attaining the max (``np.argmax`` keeps the lowest index)."""
    lin, f = _affine_forms(problem, x, p)
    return _scalar(x, problem.dim, np.argmax(lin - f, axis=0))
