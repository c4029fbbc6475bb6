"""Interior grids, monotone interpolation, and grid functions closed by exterior data."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Domain, Interval, as_points

__all__ = ["Grid", "GridFunction", "make_grid"]


class Grid:
    """Strictly interior nodes of a uniform lattice.

    In 1D the nodes are ``a + i h`` for ``i = 1..N`` with ``h = (b - a)/(N + 1)``.
    In 2D the lattice is centred on the bounding box centre and every lattice
    point with ``d > min_depth * h`` becomes a node.

    Interpolation is piecewise linear (1D) or bilinear (2D) with nonnegative
    weights summing to one.  Between the outermost nodes and the boundary
    the value of the nearest available node is used, so the interpolant
    never reads the exterior datum.
    """

    def __init__(self, domain: Domain, n: int | None = None, h: float | None = None, min_depth: float = 1e-3):
        self.domain = domain
        self.dim = domain.dim
        if self.dim == 1:
            a, b = domain.a, domain.b
            if n is None:
                if h is None:
                    raise ValueError("give n or h")
                n = int(round((b - a) / h)) - 1
            if n < 4:
                raise ValueError("grid too coarse: need at least 4 interior nodes")
            self.n = int(n)
            self.h = (b - a) / (n + 1)
            self.nodes = (a + self.h * np.arange(1, n + 1)).reshape(-1, 1)
        else:
            if h is None:
                if n is None:
                    raise ValueError("give n or h")
                lo, hi = domain.bounding_box()
                h = float(np.max(hi - lo)) / (n + 1)
            self.h = float(h)
            lo, hi = domain.bounding_box()
            self.origin = 0.5 * (lo + hi)
            half = np.ceil(0.5 * (hi - lo) / self.h).astype(int) + 1
            ii, jj = np.meshgrid(np.arange(-half[0], half[0] + 1), np.arange(-half[1], half[1] + 1), indexing="ij")
            lat = np.column_stack([ii.ravel(), jj.ravel()])
            pts = self.origin + self.h * lat
            keep = domain.signed_distance(pts) > min_depth * self.h
            self.lattice = lat[keep]
            self.nodes = pts[keep]
            self._offset = half
            self._index = -np.ones(2 * half + 1, dtype=int)
            self._index[self.lattice[:, 0] + half[0], self.lattice[:, 1] + half[1]] = np.arange(len(self.nodes))
            counts = [len(np.unique(self.lattice[:, k])) for k in range(2)]
            if min(counts) < 4:
                raise ValueError("grid too coarse: need at least 4 interior nodes per dimension")
            self._tree = cKDTree(self.nodes)
            self.n = len(self.nodes)
        self.distance = np.atleast_1d(domain.signed_distance(self.nodes))

    def __len__(self):
        return len(self.nodes)

    def refine(self) -> "Grid":
        """Grid with half the spacing whose node set contains this one (1D)."""
        if self.dim == 1:
            return Grid(self.domain, n=2 * self.n + 1)
        return Grid(self.domain, h=self.h / 2)

    def coarse_to_fine(self, fine: "Grid") -> np.ndarray:
        """Indices in ``fine`` of this grid's nodes (requires nested grids)."""
        if self.dim == 1:
            return 2 * np.arange(self.n) + 1
        dist, idx = fine._tree.query(self.nodes)
        if np.any(dist > 1e-9 * self.h):
            raise ValueError("grids are not nested")
        return idx

    def neighbor(self, i: np.ndarray, axis: int, step: int) -> np.ndarray:
        """Index of the lattice neighbour of node ``i`` or -1 when it is not a node."""
        i = np.asarray(i)
        if self.dim == 1:
            j = i + step
            return np.where((j >= 0) & (j < self.n), j, -1)
        lat = self.lattice[i].copy()
        lat[..., axis] += step
        off = self._offset
        inside = (np.abs(lat[..., 0]) <= off[0]) & (np.abs(lat[..., 1]) <= off[1])
        out = -np.ones(lat.shape[:-1], dtype=int)
        out[inside] = self._index[lat[inside, 0] + off[0], lat[inside, 1] + off[1]]
        return out

    def interp_weights(self, pts) -> tuple[np.ndarray, np.ndarray]:
        """Node indices and nonnegative weights reproducing the interpolant at ``pts``."""
        p = as_points(pts, self.dim)
        if self.dim == 1:
            a = self.domain.a
            s = (p[:, 0] - a) / self.h
            k = np.floor(s).astype(int)  # lattice index left of the point
            t = s - k
            left = np.clip(k - 1, 0, self.n - 1)
            right = np.clip(k, 0, self.n - 1)
            # strips next to the boundary: constant extension
            t = np.where(k < 1, 1.0, np.where(k >= self.n, 0.0, t))
            return np.column_stack([left, right]), np.column_stack([1.0 - t, t])
        s = (p - self.origin) / self.h
        k = np.floor(s).astype(int)
        t = s - k
        idx = np.empty((len(p), 4), dtype=int)
        w = np.empty((len(p), 4))
        off = self._offset
        c = 0
        for di in (0, 1):
            for dj in (0, 1):
                li = k[:, 0] + di
                lj = k[:, 1] + dj
                ok = (np.abs(li) <= off[0]) & (np.abs(lj) <= off[1])
                j = -np.ones(len(p), dtype=int)
                j[ok] = self._index[li[ok] + off[0], lj[ok] + off[1]]
                wx = t[:, 0] if di else 1.0 - t[:, 0]
                wy = t[:, 1] if dj else 1.0 - t[:, 1]
                idx[:, c] = j
                w[:, c] = np.where(j >= 0, wx * wy, 0.0)
                c += 1
        total = w.sum(axis=1)
        bad = total <= 1e-12
        if np.any(bad):
            _, near = self._tree.query(p[bad])
            idx[bad] = near[:, None]
            w[bad] = 0.0
            w[bad, 0] = 1.0
            total[bad] = 1.0
        w /= total[:, None]
        idx[idx < 0] = 0
        return idx, w

    def interpolate(self, values: np.ndarray, pts) -> np.ndarray:
        idx, w = self.interp_weights(pts)
        return np.sum(np.asarray(values)[idx] * w, axis=1)


def make_grid(domain: Domain, block: dict | None = None) -> Grid:
    block = block or {}
    if isinstance(domain, Interval):
        return Grid(domain, n=block.get("n"), h=block.get("h"))
    return Grid(domain, n=block.get("n"), h=block.get("h"), min_depth=block.get("min_depth", 1e-3))


class GridFunction:
    """Nodal values inside Omega closed by the exterior datum ``phi``."""

    def __init__(self, grid: Grid, values, exterior=None):
        self.grid = grid
        self.values = np.asarray(values, dtype=float).reshape(-1)
        if self.values.shape[0] != len(grid):
            raise ValueError("one value per node expected")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid function values must be finite")
        self.exterior = exterior

    def inside(self, pts) -> np.ndarray:
        return self.grid.interpolate(self.values, pts)

    def __call__(self, pts) -> np.ndarray:
        p = as_points(pts, self.grid.dim)
        d = np.atleast_1d(self.grid.domain.signed_distance(p))
        out = np.empty(len(p))
        inside = d >= 0
        if np.any(inside):
            out[inside] = self.inside(p[inside])
        if np.any(~inside):
            if self.exterior is None:
                raise ValueError("exterior datum required outside the domain")
            out[~inside] = self.exterior(p[~inside])
        return out

    @property
    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))
