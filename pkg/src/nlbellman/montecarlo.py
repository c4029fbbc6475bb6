"""Monte Carlo estimate of the exit-time payoff of the controlled jump SDE.

    dX_t = b(X_t, beta_t) dt + dZ_t,
    U(x) = E_x[ int_0^tau f(X_s) e^{-lam s} ds + phi(X_tau) e^{-lam tau} ].

Z is replaced by the compound Poisson process of its jumps longer than rho.
For a symmetric kernel the discarded small jumps have zero mean; otherwise
their mean is added to the drift.  Between jump epochs the drift is
integrated with explicit Euler steps, the running cost is frozen over a step
and discounted exactly.  Exit is tested after every step and every jump.

Paths are simulated in fixed blocks; block j draws from the stream
``SeedSequence([seed, j])`` so the estimate does not depend on how blocks
are scheduled.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Domain, as_points
from .kernel import LevyKernel, directions, unit_sphere_area

__all__ = [
    "McConfig",
    "McEstimate",
    "FeedbackPolicy",
    "jump_rate",
    "sample_jump",
    "sample_jumps",
    "small_jump_drift",
    "simulate_payoff",
    "BLOCK",
]

BLOCK = 4096


@dataclass(frozen=True)
class McConfig:
    paths: int = 100_000
    dt: float = 1e-3
    jump_cutoff: float = 1e-5
    t_max: float = 50.0
    seed: int = 0

    def __post_init__(self):
        if self.paths < 1:
            raise ValueError("paths must be positive")
        if not self.dt > 0 or not self.jump_cutoff > 0 or not self.t_max > 0:
            raise ValueError("dt, jump_cutoff and t_max must be positive")

    def to_config(self) -> dict:
        return {"paths": self.paths, "dt": self.dt, "jump_cutoff": self.jump_cutoff,
                "t_max": self.t_max, "seed": self.seed}


def mc_config_from(block: Optional[dict]) -> McConfig:
    block = dict(block or {})
    return McConfig(int(block.get("paths", 100_000)), float(block.get("dt", 1e-3)),
                    float(block.get("jump_cutoff", 1e-5)), float(block.get("t_max", 50.0)),
                    int(block.get("seed", 0)))


@dataclass
class McEstimate:
    mean: float
    stderr: float
    mean_exit_time: float
    fraction_capped: float
    paths: int
    payoffs: Optional[np.ndarray] = None

    def row(self) -> list:
        return [self.mean, self.stderr, self.mean_exit_time, self.fraction_capped]


class FeedbackPolicy:
    """Control index per grid node, extended to the domain by nearest-node lookup."""

    def __init__(self, nodes, controls: Sequence[int]):
        self.nodes = np.asarray(nodes, dtype=float)
        if self.nodes.ndim == 1:
            self.nodes = self.nodes.reshape(-1, 1)
        self.controls = np.asarray(controls, dtype=int).reshape(-1)
        if len(self.controls) != len(self.nodes):
            raise ValueError("one control per node is required")
        self._tree = cKDTree(self.nodes)

    @classmethod
    def constant(cls, k: int, dim: int = 1):
        return cls(np.zeros((1, dim)), [k])

    @classmethod
    def from_labels(cls, nodes, labels: Sequence[str], problem):
        index = {lab: k for k, lab in enumerate(problem.labels)}
        try:
            ks = [index[lab] for lab in labels]
        except KeyError as exc:
            raise ValueError(f"unknown control label {exc.args[0]!r}") from None
        return cls(nodes, ks)

    @classmethod
    def from_result(cls, result):
        return cls(result.values.grid.nodes, result.policy)

    def __call__(self, x) -> np.ndarray:
        if len(self.controls) == 1:
            return np.full(len(x), self.controls[0])
        _, j = self._tree.query(x)
        return self.controls[j]


def jump_rate(kernel: LevyKernel, rho: float) -> float:
    """Total intensity of jumps longer than rho.

    For the radial built-ins this is |S^{n-1}| int_rho^inf K(r) r^{-1-alpha} dr;
    for a callable density it is the rate of the Lambda envelope, thinned in
    ``sample_jumps``.
    """
    if rho <= 0:
        raise ValueError("jump cutoff must be positive")
    area = unit_sphere_area(kernel.dim)
    if kernel.is_radial:
        return float(area * kernel.power_integral(rho, np.inf, -1.0 - kernel.alpha))
    return float(area * kernel.Lambda * rho ** (-kernel.alpha) / kernel.alpha)


def _radii(kernel: LevyKernel, rho: float, m: np.ndarray) -> np.ndarray:
    """Invert the radial mass function M(r) = int_rho^r K s^{-1-alpha} ds at m."""
    a = kernel.alpha
    if not kernel.is_radial:
        return rho * (1.0 - a * m / kernel.Lambda * rho**a) ** (-1.0 / a)
    edges = np.concatenate([[rho], kernel.breaks[kernel.breaks > rho], [np.inf]])
    levels = kernel.radial(edges[:-1])
    cum = np.concatenate([[0.0], np.cumsum(kernel.power_integral(edges[:-1], edges[1:], -1.0 - a))])
    j = np.clip(np.searchsorted(cum, m, side="right") - 1, 0, len(levels) - 1)
    # skip zero-density pieces (m lands exactly on a flat part of M)
    while np.any(levels[j] == 0):
        bad = levels[j] == 0
        j[bad] = np.minimum(j[bad] + 1, len(levels) - 1)
    lo = edges[j]
    rest = m - cum[j]
    return (lo ** (-a) - a * rest / levels[j]) ** (-1.0 / a)


def _unit_vectors(dim: int, n: int, rng: np.random.Generator) -> np.ndarray:
    if dim == 1:
        return rng.choice(np.array([-1.0, 1.0]), size=n).reshape(-1, 1)
    th = rng.uniform(0.0, 2 * np.pi, size=n)
    return np.column_stack([np.cos(th), np.sin(th)])


def sample_jumps(kernel: LevyKernel, rho: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """n jump vectors with law proportional to K(z)|z|^{-n-alpha} on |z| > rho.

    Radial built-ins use inverse transform in r and a uniform direction.  A
    callable density is sampled from its Lambda envelope and the proposal is
    kept with probability K(z)/Lambda; rejected proposals are returned as zero
    vectors (thinning), which keeps the jump epochs at the envelope rate.
    """
    per_dir = jump_rate(kernel, rho) / unit_sphere_area(kernel.dim)
    m = rng.uniform(0.0, per_dir, size=n)
    r = _radii(kernel, rho, m)
    z = r[:, None] * _unit_vectors(kernel.dim, n, rng)
    if not kernel.is_radial:
        keep = rng.uniform(size=n) * kernel.Lambda <= kernel.K(z)
        z[~keep] = 0.0
    return z


def sample_jump(kernel: LevyKernel, rho: float, rng: np.random.Generator):
    """(waiting time, jump vector) of the compound Poisson process of jumps above rho."""
    rate = jump_rate(kernel, rho)
    if rate <= 0:
        return np.inf, np.zeros(kernel.dim)
    wait = rng.exponential(1.0 / rate)
    return float(wait), sample_jumps(kernel, rho, 1, rng)[0]


def small_jump_drift(kernel: LevyKernel, rho: float, n_panels: int = 60) -> np.ndarray:
    """Mean of the discarded jumps, int_{|z|<=rho} z K(z)|z|^{-n-alpha} dz.

    Zero for radial densities.  For a callable density the radial integral
    int_0^rho K(r theta) r^{-alpha} dr is done on geometric panels toward 0.
    """
    if kernel.is_radial:
        return np.zeros(kernel.dim)
    th, w = directions(kernel.dim, 64)
    x, gw = np.polynomial.legendre.leggauss(8)
    edges = rho * 0.5 ** np.arange(n_panels + 1)[::-1]
    edges[0] = 0.0
    out = np.zeros(kernel.dim)
    for lo, hi in zip(edges[:-1], edges[1:]):
        r = 0.5 * (hi - lo) * x + 0.5 * (hi + lo)
        rw = 0.5 * (hi - lo) * gw * r ** (-kernel.alpha)
        for t, wt in zip(th, w):
            vals = kernel.K(r[:, None] * t[None, :])
            out += wt * t * np.sum(rw * vals)
    return out


def _block(domain, kernel, problem, policy, x0, cfg: McConfig, n: int, rng, rate, comp):
    dim = problem.dim
    lam = problem.lam
    x = np.repeat(as_points(x0, dim), n, axis=0)
    t = np.zeros(n)
    acc = np.zeros(n)
    exit_t = np.zeros(n)
    capped = np.zeros(n, dtype=bool)
    next_jump = rng.exponential(1.0 / rate, size=n) if rate > 0 else np.full(n, np.inf)
    alive = np.arange(n)
    drifts = problem.controls
    while alive.size:
        xa, ta = x[alive], t[alive]
        step = np.minimum(np.minimum(cfg.dt, next_jump[alive] - ta), cfg.t_max - ta)
        step = np.maximum(step, 0.0)
        k = policy(xa)
        b = np.empty_like(xa)
        f = np.empty(len(xa))
        for j in np.unique(k):
            sel = k == j
            b[sel] = drifts[j].drift(xa[sel])
            f[sel] = drifts[j].cost(xa[sel])
        if lam > 0:
            acc[alive] += f * (np.exp(-lam * ta) - np.exp(-lam * (ta + step))) / lam
        else:
            acc[alive] += f * step
        xa = xa + (b + comp) * step[:, None]
        ta = ta + step
        jump = ta >= next_jump[alive]
        out = np.atleast_1d(domain.signed_distance(xa)) <= 0
        # a jump at the end of the step is only taken if the drift did not exit first
        jmp = jump & ~out
        if np.any(jmp):
            xa[jmp] += sample_jumps(kernel, cfg.jump_cutoff, int(jmp.sum()), rng)
            nj = alive[jmp]
            next_jump[nj] += rng.exponential(1.0 / rate, size=len(nj))
            out[jmp] = np.atleast_1d(domain.signed_distance(xa[jmp])) <= 0
        x[alive], t[alive] = xa, ta
        if np.any(out):
            ex = alive[out]
            acc[ex] += problem.phi(xa[out]) * np.exp(-lam * ta[out])
            exit_t[ex] = ta[out]
        cap = ~out & (ta >= cfg.t_max)
        if np.any(cap):
            capped[alive[cap]] = True
            exit_t[alive[cap]] = cfg.t_max
        alive = alive[~out & ~cap]
    return acc, exit_t, capped


def simulate_payoff(domain: Domain, kernel: LevyKernel, problem, policy, x0, config: McConfig,
                    keep_payoffs: bool = False) -> McEstimate:
    """Estimate of the payoff started at x0 under a feedback policy.

    ``policy`` is a FeedbackPolicy or an integer control index.  Capped paths
    contribute their running cost up to t_max and are counted in
    ``fraction_capped``.
    """
    p0 = as_points(x0, problem.dim)
    if np.atleast_1d(domain.signed_distance(p0))[0] <= 0:
        raise ValueError("x0 must lie inside the domain")
    if isinstance(policy, (int, np.integer)):
        policy = FeedbackPolicy.constant(int(policy), problem.dim)
    rate = jump_rate(kernel, config.jump_cutoff)
    comp = small_jump_drift(kernel, config.jump_cutoff)
    pay, ext, cap = [], [], []
    done = 0
    j = 0
    while done < config.paths:
        n = min(BLOCK, config.paths - done)
        rng = np.random.default_rng(np.random.SeedSequence([int(config.seed) & (2**64 - 1), j]))
        a, e, c = _block(domain, kernel, problem, policy, p0, config, n, rng, rate, comp)
        pay.append(a)
        ext.append(e)
        cap.append(c)
        done += n
        j += 1
    pay = np.concatenate(pay)
    ext = np.concatenate(ext)
    cap = np.concatenate(cap)
    std = float(pay.std(ddof=1)) if len(pay) > 1 else 0.0
    return McEstimate(float(pay.mean()), std / np.sqrt(len(pay)), float(ext.mean()), float(cap.mean()),
                      len(pay), pay if keep_payoffs else None)
