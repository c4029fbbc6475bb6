"""Monotone discretisation of the censored equation

    lambda_bar(x) u - I_Omega[u] + H(x, Du) = phi_bar(x)   in Omega,

and its solution by policy iteration (Howard), value iteration, and the
epsilon-penalised double-obstacle problem used in the Perron construction.

For a frozen control k the scheme is a row-diagonally-dominant M-matrix
system  A_k u = c_k  with

    A_k = diag(lambda_bar + sum_j W_ij + drift_k) - W - D_k
    c_k = phi_bar + f_k + ghost_k

where W are the (nonnegative) censored quadrature weights mapped onto the
nodes by linear interpolation, D_k the upwind drift couplings, and ghost_k
collects upwind neighbours that fall on the boundary, where the value phi
is used.  Row sums give  diag - sum(off) - ghost coefficients = lambda_bar.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .grid import Grid, GridFunction
from .kernel import QuadratureSpec, node_rule

__all__ = [
    "DiscreteScheme",
    "SolverResult",
    "ConvergenceError",
    "SchemeError",
    "BoundViolation",
    "assemble",
    "policy_iteration",
    "value_iteration",
    "solve_penalized",
    "PerronReport",
    "perron_sweep",
    "refinement_gap",
]


class ConvergenceError(RuntimeError):
    def __init__(self, msg, result=None):
        super().__init__(msg)
        self.result = result


class SchemeError(RuntimeError):
    """The assembled system is not a monotone M-matrix scheme."""


class BoundViolation(AssertionError):
    pass


@dataclass
class DiscreteScheme:
    grid: Grid
    domain: object
    kernel: object
    problem: object
    quad: QuadratureSpec
    W: np.ndarray  # (N, N) censored weights, zero diagonal
    tail: np.ndarray
    ext_matrix: sp.csr_matrix  # (N, P): phi_bar = ext_matrix @ phi(ext_points)
    ext_points: np.ndarray
    drift_diag: np.ndarray  # (m, N)
    drift_off: list  # m sparse (N, N), nonnegative
    ghost_coef: np.ndarray  # (m, N) total ghost coefficient per row
    ghosts: list  # per control: (node index, coefficient, boundary point)
    costs: np.ndarray  # (m, N)
    phibar: np.ndarray
    ghost_term: np.ndarray  # (m, N) sum of coefficient * phi(boundary point)
    mu0: float
    m_ok: bool
    warnings: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.grid)

    @property
    def m(self) -> int:
        return self.costs.shape[0]

    @property
    def lam_bar(self) -> np.ndarray:
        return self.problem.lam + self.tail

    def diag(self, k: int) -> np.ndarray:
        return self.lam_bar + self.W.sum(axis=1) + self.drift_diag[k]

    def rhs(self, k: int) -> np.ndarray:
        return self.phibar + self.costs[k] + self.ghost_term[k]

    def matrix(self, k: int) -> np.ndarray:
        A = -self.W - self.drift_off[k].toarray()
        A[np.diag_indices(self.n)] = self.diag(k)
        return A

    def off_apply(self, k: int, u: np.ndarray, Wu: Optional[np.ndarray] = None) -> np.ndarray:
        Wu = self.W @ u if Wu is None else Wu
        return Wu + self.drift_off[k] @ u

    def bellman_residuals(self, u: np.ndarray) -> np.ndarray:
        """(m, N) array of (A_k u - c_k)."""
        Wu = self.W @ u
        return np.stack([self.diag(k) * u - self.off_apply(k, u, Wu) - self.rhs(k) for k in range(self.m)])

    @property
    def f_sup(self) -> float:
        return float(np.max(np.abs(self.costs)))

    @property
    def bound_R(self) -> float:
        return self.problem.phi.sup + self.f_sup / self.mu0

    def row_balance(self, k: int) -> np.ndarray:
        """diag - sum(off) - ghost coefficient, which should equal lambda_bar."""
        return self.diag(k) - self.W.sum(axis=1) - np.asarray(self.drift_off[k].sum(axis=1)).ravel() - self.ghost_coef[k]

    def with_phi(self, phi) -> "DiscreteScheme":
        """Same operator with a new exterior datum (phi_bar and ghost values recomputed)."""
        prob = self.problem.with_phi(phi)
        out = _copy(self, problem=prob)
        out.phibar = self.ext_matrix @ phi(self.ext_points)
        out.ghost_term = _ghost_term(self.ghosts, phi, self.n)
        return out

    def with_costs(self, coeffs) -> "DiscreteScheme":
        prob = self.problem.with_costs(coeffs)
        out = _copy(self, problem=prob)
        out.costs = prob.costs(self.grid.nodes)
        return out

    def restrict(self, k: int) -> "DiscreteScheme":
        """Scheme of the single-control problem frozen at control k."""
        out = _copy(self, problem=self.problem.restrict(k))
        out.drift_diag = self.drift_diag[k:k + 1]
        out.drift_off = [self.drift_off[k]]
        out.ghost_coef = self.ghost_coef[k:k + 1]
        out.ghosts = [self.ghosts[k]]
        out.ghost_term = self.ghost_term[k:k + 1]
        out.costs = self.costs[k:k + 1]
        return out


def _copy(s: DiscreteScheme, **kw) -> DiscreteScheme:
    d = dict(s.__dict__)
    d.update(kw)
    return DiscreteScheme(**d)


def _ghost_term(ghosts, phi, N) -> np.ndarray:
    out = np.zeros((len(ghosts), N))
    for k, (idx, coef, pts) in enumerate(ghosts):
        if len(idx):
            out[k] = np.bincount(idx, weights=coef * phi(pts), minlength=N)
    return out


def assemble(domain, kernel, problem, grid: Grid, quad: Optional[QuadratureSpec] = None) -> DiscreteScheme:
    """Build the per-control monotone linear operators."""
    quad = quad or QuadratureSpec()
    N = len(grid)
    dim = grid.dim
    if dim == 1 and N < 4:
        raise ValueError("grid too coarse")
    nodes = grid.nodes
    W = np.zeros((N, N))
    tail = np.zeros(N)
    ext_rows, ext_cols, ext_vals, ext_pts = [], [], [], []
    offset = 0
    breaks = nodes[:, 0] if dim == 1 else None
    for i in range(N):
        delta = quad.default_delta(grid.h, grid.distance[i])
        rule = node_rule(domain, kernel, quad, nodes[i], delta, breaks)
        pts = np.vstack([rule.cen_pts, rule.inn_pts])
        wts = np.concatenate([rule.cen_w, rule.inn_w])
        idx, iw = grid.interp_weights(pts)
        W[i] += np.bincount(idx.ravel(), weights=(iw * wts[:, None]).ravel(), minlength=N)
        tail[i] = rule.tail
        P = len(rule.ext_w)
        ext_rows.append(np.full(P, i))
        ext_cols.append(offset + np.arange(P))
        ext_vals.append(rule.ext_w)
        ext_pts.append(rule.ext_pts)
        offset += P
    W[np.diag_indices(N)] = 0.0  # self-coupling cancels in u_j - u_i
    ext_points = np.vstack(ext_pts)
    E = sp.csr_matrix((np.concatenate(ext_vals), (np.concatenate(ext_rows), np.concatenate(ext_cols))),
                      shape=(N, offset))
    if np.any(W < 0) or np.any(E.data < 0):
        raise SchemeError("negative quadrature weight")

    m = problem.m
    drifts = problem.drifts(nodes)  # (m, N, dim)
    drift_diag = np.zeros((m, N))
    ghost_coef = np.zeros((m, N))
    drift_off = []
    ghosts = []
    h = grid.h
    for k in range(m):
        rows, cols, vals = [], [], []
        g_idx, g_coef, g_pts = [], [], []
        for a in range(dim):
            b = drifts[k, :, a]
            for step in (1, -1):
                sel = np.flatnonzero(b * step > 0)
                if len(sel) == 0:
                    continue
                mag = np.abs(b[sel])
                nb = grid.neighbor(sel, a, step)
                inner = nb >= 0
                rows.append(sel[inner])
                cols.append(nb[inner])
                vals.append(mag[inner] / h)
                drift_diag[k, sel[inner]] += mag[inner] / h
                for i in sel[~inner]:
                    e = np.zeros(dim)
                    e[a] = step
                    s = float(domain.exit_distance(nodes[i], e[None, :])[0])
                    c = abs(b[i]) / s
                    g_idx.append(i)
                    g_coef.append(c)
                    g_pts.append(nodes[i] + s * e)
                    drift_diag[k, i] += c
                    ghost_coef[k, i] += c
        if rows:
            D = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N))
        else:
            D = sp.csr_matrix((N, N))
        drift_off.append(D)
        ghosts.append((np.array(g_idx, dtype=int), np.array(g_coef), np.array(g_pts).reshape(-1, dim)))

    costs = problem.costs(nodes)
    phibar = E @ problem.phi(ext_points)
    ghost_term = _ghost_term(ghosts, problem.phi, N)
    mu0 = problem.lam + float(tail.min())
    notes = []
    if not mu0 > 0:
        notes.append("assumption (M) fails on this grid: lambda + min tail mass <= 0")
        warnings.warn(notes[-1])
    return DiscreteScheme(grid, domain, kernel, problem, quad, W, tail, E, ext_points, drift_diag, drift_off,
                          ghost_coef, ghosts, costs, phibar, ghost_term, mu0, mu0 > 0, notes)


@dataclass
class SolverResult:
    values: GridFunction
    policy: np.ndarray
    labels: list
    residual_history: list
    iterations: int
    bound_R: float
    mu0: float
    converged: bool
    final_residual: float
    node_residual: np.ndarray
    method: str = ""
    contraction: float = np.nan

    @property
    def u(self) -> np.ndarray:
        return self.values.values

    @property
    def policy_labels(self) -> list:
        return [self.labels[k] for k in self.policy]

    def summary(self) -> dict:
        return {"method": self.method, "iterations": self.iterations, "converged": self.converged,
                "final_residual": self.final_residual, "bound_R": self.bound_R, "mu0": self.mu0,
                "sup_u": float(np.max(np.abs(self.u))), "contraction_bound": self.contraction}


def _finish(scheme, u, policy, hist, iters, converged, res, node_res, method, tol, check_bound, contraction=np.nan):
    result = SolverResult(GridFunction(scheme.grid, u, scheme.problem.phi), policy, scheme.problem.labels, hist,
                          iters, scheme.bound_R, scheme.mu0, converged, res, node_res, method, contraction)
    if not converged:
        raise ConvergenceError(f"{method} did not converge: residual {res:.3e} > tol {tol:.1e}", result)
    if check_bound and np.max(np.abs(u)) > scheme.bound_R + tol:
        raise BoundViolation(f"|u| = {np.max(np.abs(u)):.6g} exceeds the a priori bound {scheme.bound_R:.6g}")
    return result


def _check_mmatrix(A: np.ndarray):
    off = A - np.diag(np.diag(A))
    if np.any(off > 1e-12 * np.max(np.abs(A))) or np.any(np.diag(A) <= 0):
        raise SchemeError("frozen-policy matrix is not an M-matrix")


def policy_iteration(scheme: DiscreteScheme, tol: float = 1e-9, max_outer: int = 50,
                     policy0: Optional[np.ndarray] = None, check_bound: bool = True) -> SolverResult:
    """Howard's algorithm for max_k (A_k u - c_k) = 0.

    The policy is improved only where another control beats the current one
    by more than a roundoff margin; among those the lowest index wins.
    """
    N, m = scheme.n, scheme.m
    mats = [scheme.matrix(k) for k in range(m)]
    rhs = [scheme.rhs(k) for k in range(m)]
    for A in mats:
        _check_mmatrix(A)
    if policy0 is None:
        policy = np.argmax(-np.stack(rhs), axis=0)
    else:
        policy = np.asarray(policy0, dtype=int).copy()
    hist = []
    rows = np.arange(N)
    u = np.zeros(N)
    res = np.inf
    node_res = np.zeros(N)
    for it in range(1, max_outer + 1):
        A = np.stack(mats)[policy, rows, :]
        c = np.stack(rhs)[policy, rows]
        try:
            u = scipy.linalg.solve(A, c, check_finite=True)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SchemeError(f"linear solve failed: {exc}") from exc
        R = np.stack([mats[k] @ u - rhs[k] for k in range(m)])
        node_res = R.max(axis=0)
        res = float(np.max(np.abs(node_res)))
        hist.append(res)
        if res <= tol:
            return _finish(scheme, u, policy, hist, it, True, res, node_res, "policy_iteration", tol, check_bound)
        margin = 1e-13 * (1.0 + np.abs(R).max(axis=0))
        best = np.argmax(R, axis=0)
        improve = R[best, rows] > R[policy, rows] + margin
        if not np.any(improve):
            # no strict improvement left: residual is at roundoff level
            converged = res <= max(tol, 1e3 * np.finfo(float).eps * np.max(np.abs(A)) * max(1.0, np.max(np.abs(u))))
            return _finish(scheme, u, policy, hist, it, converged, res, node_res, "policy_iteration", tol, check_bound)
        policy = np.where(improve, best, policy)
    return _finish(scheme, u, policy, hist, max_outer, False, res, node_res, "policy_iteration", tol, check_bound)


def value_iteration(scheme: DiscreteScheme, tol: float = 1e-9, max_iters: int = 200000, omega: float = 1.0,
                    u0: Optional[np.ndarray] = None, check_bound: bool = True) -> SolverResult:
    """Jacobi fixed point u_i <- min_k (c_k + off_k u)_i / diag_k(i), optionally relaxed.

    The sup-norm contraction factor max_i sum(off)/diag < 1 comes from
    lambda_bar >= mu0 > 0 and is recorded in the result.
    """
    N, m = scheme.n, scheme.m
    diags = np.stack([scheme.diag(k) for k in range(m)])
    rhs = np.stack([scheme.rhs(k) for k in range(m)])
    offsum = np.stack([scheme.W.sum(axis=1) + np.asarray(scheme.drift_off[k].sum(axis=1)).ravel() for k in range(m)])
    contraction = float(np.max(offsum / diags))
    u = np.zeros(N) if u0 is None else np.asarray(u0, dtype=float).copy()
    hist = []
    res = np.inf
    node_res = np.zeros(N)
    for it in range(1, max_iters + 1):
        Wu = scheme.W @ u
        Q = np.stack([(rhs[k] + Wu + scheme.drift_off[k] @ u) / diags[k] for k in range(m)])
        node_res = np.max(diags * (u[None, :] - Q), axis=0)
        res = float(np.max(np.abs(node_res)))
        hist.append(res)
        if res <= tol:
            return _finish(scheme, u, np.argmin(Q, axis=0), hist, it, True, res, node_res, "value_iteration", tol,
                           check_bound, contraction)
        u = u + omega * (Q.min(axis=0) - u)
    return _finish(scheme, u, np.argmin(Q, axis=0), hist, max_iters, False, res, node_res, "value_iteration", tol,
                   check_bound, contraction)


# --------------------------------------------------------------------------
# penalised double-obstacle problem


def penalty_obstacles(scheme: DiscreteScheme, eps: float):
    """psi_-, psi_+ = phi_tilde -/+ d_+/eps at the nodes (phi_tilde: the datum's own extension)."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    phit = scheme.problem.phi(scheme.grid.nodes)
    dplus = np.maximum(scheme.grid.distance, 0.0)
    return phit - dplus / eps, phit + dplus / eps


def _penalized_residual(scheme, w, lo, hi):
    R = scheme.bellman_residuals(w)
    G = np.maximum(w - hi, R.max(axis=0))
    return np.minimum(w - lo, G), R, G


def solve_penalized(scheme: DiscreteScheme, eps: float, tol: float = 1e-9, max_outer: int = 50,
                    max_sweeps: int = 500000) -> SolverResult:
    """Solve min{w - psi_-, max{w - psi_+, max_k(A_k w - c_k)}} = 0 at every node.

    Nodes outside the domain are pinned to phi, which is what the penalised
    equation forces there; only the interior nodes are unknowns.  The
    solution is computed by policy iteration over the choices {lower
    obstacle, upper obstacle, control k}; if that fails to settle, a
    projected Jacobi sweep (a contraction) finishes the job.
    """
    lo, hi = penalty_obstacles(scheme, eps)
    N, m = scheme.n, scheme.m
    mats = np.stack([scheme.matrix(k) for k in range(m)])
    rhs = np.stack([scheme.rhs(k) for k in range(m)])
    rows = np.arange(N)
    eye = np.eye(N)
    # nested Howard: the outer loop fixes the set of nodes sitting on the lower
    # obstacle, the inner loop solves the max-problem (controls or upper
    # obstacle) on the remaining nodes exactly.
    lower = np.zeros(N, dtype=bool)
    choice = np.argmax(-rhs, axis=0)  # 0..m-1 controls, m upper obstacle
    hist = []
    w = np.clip(np.zeros(N), lo, hi)
    inner_total = 0
    for it in range(1, max_outer + 1):
        for _ in range(max_outer):
            inner_total += 1
            A = np.empty((N, N))
            c = np.empty(N)
            ctl = (choice < m) & ~lower
            A[ctl] = mats[choice[ctl], rows[ctl], :]
            c[ctl] = rhs[choice[ctl], rows[ctl]]
            up = (choice == m) & ~lower
            A[up] = eye[up]
            c[up] = hi[up]
            A[lower] = eye[lower]
            c[lower] = lo[lower]
            w = scipy.linalg.solve(A, c)
            R = np.stack([mats[k] @ w - rhs[k] for k in range(m)])
            vals = np.vstack([R, (w - hi)[None, :]])
            cur = vals[choice, rows]
            best = np.argmax(vals, axis=0)
            margin = 1e-13 * (1.0 + np.abs(vals).max(axis=0))
            improve = (vals[best, rows] > cur + margin) & ~lower
            if not np.any(improve):
                break
            choice = np.where(improve, best, choice)
        G = np.max(vals, axis=0)
        F = np.minimum(w - lo, G)
        res = float(np.max(np.abs(F)))
        hist.append(res)
        if res <= tol:
            return _finish(scheme, w, np.where(choice < m, choice, -1), hist, inner_total, True, res, F,
                           "penalized_howard", tol, False)
        margin = 1e-13 * (1.0 + np.abs(G))
        new_lower = np.where(lower, G > (w - lo) - margin, (w - lo) < G - margin)
        new_lower = np.where(lower & (G < -margin), False, new_lower)
        if np.array_equal(new_lower, lower):
            break
        lower = new_lower
    # fallback: projected Jacobi, w_i <- clamp(min_k Q_k, psi_-, psi_+)
    diags = np.stack([scheme.diag(k) for k in range(m)])
    for sweep in range(max_sweeps):
        Wu = scheme.W @ w
        Q = np.stack([(rhs[k] + Wu + scheme.drift_off[k] @ w) / diags[k] for k in range(m)])
        w_new = np.clip(Q.min(axis=0), lo, hi)
        if sweep % 50 == 0 or np.max(np.abs(w_new - w)) < tol * 1e-2:
            F, _, _ = _penalized_residual(scheme, w_new, lo, hi)
            res = float(np.max(np.abs(F)))
            hist.append(res)
            if res <= tol:
                return _finish(scheme, w_new, np.argmin(Q, axis=0), hist, len(hist), True, res, F,
                               "penalized_jacobi", tol, False)
        w = w_new
    return _finish(scheme, w, np.argmin(Q, axis=0), hist, len(hist), False, res, F, "penalized_jacobi", tol, False)


def refinement_gap(coarse: SolverResult, fine: SolverResult, min_depth_h: float = 4.0) -> float:
    """Sup-norm difference of two nested solves on coarse nodes with d >= min_depth_h * h_coarse."""
    gc, gf = coarse.values.grid, fine.values.grid
    idx = gc.coarse_to_fine(gf)
    mask = gc.distance >= min_depth_h * gc.h
    if not np.any(mask):
        mask = np.ones(len(gc), dtype=bool)
    return float(np.max(np.abs(coarse.u[mask] - fine.u[idx[mask]])))


@dataclass
class PerronReport:
    eps: list
    bounds_ok: list
    g_sup: float
    differences: list
    monotone: bool
    final_gap: float
    tol_disc: float
    agreement_ok: bool
    iterations: list

    @property
    def passed(self) -> bool:
        return all(self.bounds_ok) and self.monotone and self.agreement_ok

    def summary(self) -> dict:
        return {"eps": self.eps, "bounds_ok": self.bounds_ok, "g_sup": self.g_sup, "differences": self.differences,
                "monotone": self.monotone, "final_gap": self.final_gap, "tol_disc": self.tol_disc,
                "agreement_ok": self.agreement_ok, "passed": self.passed}


def perron_sweep(scheme: DiscreteScheme, direct: SolverResult, tol_disc: float,
                 eps_list: Sequence[float] = tuple(2.0 ** -np.arange(7)), min_depth_h: float = 4.0,
                 tol: float = 1e-9) -> PerronReport:
    """Penalised solves along an eps sweep, checked against the barrier g and the direct solve.

    g = 2R inside the closed domain and R outside; the exterior nodes of the
    extended grid carry phi, so |w| <= R <= g there by construction.
    """
    R = scheme.bound_R
    mask = scheme.grid.distance >= min_depth_h * scheme.grid.h
    ws, ok, its = [], [], []
    for eps in eps_list:
        res = solve_penalized(scheme, eps, tol)
        ws.append(res.u)
        ok.append(bool(np.all(np.abs(res.u) <= 2 * R + tol)))
        its.append(res.iterations)
    diffs = [float(np.max(np.abs(ws[j + 1][mask] - ws[j][mask]))) for j in range(len(ws) - 1)]
    monotone = all(diffs[j + 1] <= diffs[j] for j in range(len(diffs) - 1))
    gap = float(np.max(np.abs(ws[-1][mask] - direct.u[mask])))
    return PerronReport([float(e) for e in eps_list], ok, 2 * R, diffs, monotone, gap, tol_disc,
                        bool(gap <= 10 * tol_disc), its)
