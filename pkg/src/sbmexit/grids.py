"""Regular grids aligned with the subdomain chain, with Laplacian assembly.

Disk domains use a polar (r, theta) grid whose rings are chosen so that every
chain circle lands exactly on a ring; rectangle domains use a Cartesian grid
whose spacing divides every chain inset.  Alignment makes Dirichlet data exact
(values sit on genuine grid nodes) and makes a solve on D_k restrict to a
solve on D_j without any interpolation error, which the nested-solve check
relies on.

Both grids expose the same small interface: node coordinates, the interior /
boundary node sets of each region, a sparse Laplacian over candidate interior
nodes, bilinear interpolation, and nodal gradients in Cartesian components.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .geometry import FULL, Disk, DomainChain, GeometryError, Rect


class GridError(ValueError):
    """Grid resolution incompatible with the chain geometry."""


def _aligned_index(value: float, step: float, what: str) -> int:
    idx = value / step
    r = round(idx)
    if abs(idx - r) > 1e-9:
        raise GridError(f"{what} = {value} is not a multiple of the grid step {step}")
    return int(r)


class PolarGrid:
    """Uniform (r, theta) grid on a disk; node 0 is the center, rings follow.

    Ring i in 1..nr sits at radius i * dr; ring nr is the ambient boundary.
    Node layout: index 0 = center, then ring-major blocks of ntheta nodes.
    """

    def __init__(self, chain: DomainChain, nr: int, ntheta: int):
        disk = chain.shape
        if not isinstance(disk, Disk):
            raise GridError("PolarGrid requires a disk domain")
        if nr < 2 or ntheta < 8:
            raise GridError(f"polar grid too coarse: nr={nr}, ntheta={ntheta}")
        self.chain = chain
        self.disk = disk
        self.nr = nr
        self.ntheta = ntheta
        self.dr = disk.radius / nr
        self.dtheta = 2.0 * np.pi / ntheta
        self.n_nodes = 1 + nr * ntheta
        # Every chain circle must land on a ring.
        self._ring_of_region = {FULL: nr}
        for k in range(1, chain.depth + 1):
            rk = chain.region(k).radius
            self._ring_of_region[k] = _aligned_index(rk, self.dr, f"chain radius D_{k}")
        self._theta = np.arange(ntheta) * self.dtheta
        self._cos = np.cos(self._theta)
        self._sin = np.sin(self._theta)
        self._xy = self._node_xy()
        self._lap = self._assemble_laplacian()

    # -- node bookkeeping -------------------------------------------------

    def node_index(self, ring: int, col) -> np.ndarray:
        if ring == 0:
            return np.zeros_like(np.asarray(col)) if np.ndim(col) else 0
        return 1 + (ring - 1) * self.ntheta + np.mod(col, self.ntheta)

    def _node_xy(self) -> np.ndarray:
        xy = np.empty((self.n_nodes, 2))
        xy[0] = [self.disk.cx, self.disk.cy]
        for i in range(1, self.nr + 1):
            r = i * self.dr
            sl = slice(1 + (i - 1) * self.ntheta, 1 + i * self.ntheta)
            xy[sl, 0] = self.disk.cx + r * self._cos
            xy[sl, 1] = self.disk.cy + r * self._sin
        return xy

    @property
    def node_xy(self) -> np.ndarray:
        return self._xy

    def boundary_ring(self, region: int) -> int:
        try:
            return self._ring_of_region[region]
        except KeyError:
            raise GridError(f"unknown region selector {region}") from None

    def interior_nodes(self, region: int) -> np.ndarray:
        ib = self.boundary_ring(region)
        return np.arange(0, 1 + (ib - 1) * self.ntheta)

    def boundary_nodes(self, region: int) -> np.ndarray:
        ib = self.boundary_ring(region)
        return np.arange(1 + (ib - 1) * self.ntheta, 1 + ib * self.ntheta)

    # -- operators ---------------------------------------------------------

    def _assemble_laplacian(self) -> sp.csr_matrix:
        """Full-plane Laplacian rows for every node that can be interior.

        Row i approximates (Laplace u)_i using the 5-point polar stencil;
        rows exist for rings 0..nr-1 (ring nr is always boundary).
        """
        rows, cols, vals = [], [], []
        dr, dth, nth = self.dr, self.dtheta, self.ntheta
        # Center node: mean over the first ring.
        rows.extend([0] * (nth + 1))
        cols.append(0)
        vals.append(-4.0 / dr**2)
        for j in range(nth):
            cols.append(self.node_index(1, j))
            vals.append(4.0 / (dr**2 * nth))
        for i in range(1, self.nr):
            r = i * dr
            ap = 1.0 / dr**2 + 1.0 / (2.0 * r * dr)
            am = 1.0 / dr**2 - 1.0 / (2.0 * r * dr)
            at = 1.0 / (r**2 * dth**2)
            diag = -2.0 / dr**2 - 2.0 * at
            base = 1 + (i - 1) * nth
            for j in range(nth):
                me = base + j
                rows.extend([me] * 5)
                cols.extend(
                    [
                        me,
                        self.node_index(i + 1, j),
                        self.node_index(i - 1, j),
                        base + (j + 1) % nth,
                        base + (j - 1) % nth,
                    ]
                )
                vals.extend([diag, ap, am, at, at])
        return sp.csr_matrix(
            (vals, (rows, cols)), shape=(self.n_nodes, self.n_nodes)
        )

    @property
    def laplacian(self) -> sp.csr_matrix:
        return self._lap

    def apply_laplacian(self, values: np.ndarray) -> np.ndarray:
        """Difference-first evaluation of the Laplacian at candidate rows.

        Subtracting neighbor values before scaling keeps the huge near-center
        theta coefficients from amplifying float64 rounding; the assembled
        matrix (used for Jacobians) is the same operator.
        """
        g = self._ring_view(values)
        dr, dth = self.dr, self.dtheta
        fwd = np.roll(g, -1, axis=1) - g
        bwd = g - np.roll(g, 1, axis=1)
        d2t = fwd - bwd
        out = np.zeros(self.n_nodes)
        out[0] = 4.0 * np.mean(g[1] - g[0]) / dr**2
        rr = np.arange(1, self.nr)[:, None] * dr
        da = g[2:] - g[1:-1]
        db = g[1:-1] - g[:-2]
        body = (da - db) / dr**2 + (da + db) / (2.0 * rr * dr) \
            + d2t[1:-1] / (rr**2 * dth**2)
        out[1 : 1 + (self.nr - 1) * self.ntheta] = body.ravel()
        return out

    # -- interpolation and gradients ----------------------------------------

    def _ring_view(self, values: np.ndarray) -> np.ndarray:
        """(nr+1, ntheta) view with row 0 = repeated center value."""
        out = np.empty((self.nr + 1, self.ntheta))
        out[0] = values[0]
        out[1:] = values[1:].reshape(self.nr, self.ntheta)
        return out

    def interp(self, values: np.ndarray, pts) -> np.ndarray:
        p = np.atleast_2d(np.asarray(pts, dtype=float))
        rel_x = p[:, 0] - self.disk.cx
        rel_y = p[:, 1] - self.disk.cy
        r = np.hypot(rel_x, rel_y)
        th = np.mod(np.arctan2(rel_y, rel_x), 2.0 * np.pi)
        fr = np.clip(r / self.dr, 0.0, self.nr - 1e-12)
        i0 = fr.astype(np.int64)
        tr = fr - i0
        ft = th / self.dtheta
        j0 = ft.astype(np.int64) % self.ntheta
        tt = ft - np.floor(ft)
        grid = self._ring_view(values)
        j1 = (j0 + 1) % self.ntheta
        v00 = grid[i0, j0]
        v01 = grid[i0, j1]
        v10 = grid[i0 + 1, j0]
        v11 = grid[i0 + 1, j1]
        return (1 - tr) * ((1 - tt) * v00 + tt * v01) + tr * ((1 - tt) * v10 + tt * v11)

    def gradient(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nodal gradient in Cartesian components, central differences."""
        grid = self._ring_view(values)
        dvdr = np.empty_like(grid)
        dvdr[1:-1] = (grid[2:] - grid[:-2]) / (2.0 * self.dr)
        dvdr[0] = 0.0
        dvdr[-1] = (grid[-1] - grid[-2]) / self.dr
        dvdt = (np.roll(grid, -1, axis=1) - np.roll(grid, 1, axis=1)) / (2.0 * self.dtheta)
        rr = np.arange(self.nr + 1)[:, None] * self.dr
        with np.errstate(divide="ignore", invalid="ignore"):
            inv_r = np.where(rr > 0.0, 1.0 / rr, 0.0)
        gx = dvdr * self._cos[None, :] - dvdt * inv_r * self._sin[None, :]
        gy = dvdr * self._sin[None, :] + dvdt * inv_r * self._cos[None, :]
        # Center: first Fourier mode of the first ring.
        gx[0] = (2.0 / self.ntheta) * np.sum(grid[1] * self._cos) / self.dr
        gy[0] = (2.0 / self.ntheta) * np.sum(grid[1] * self._sin) / self.dr
        flat_x = np.empty(self.n_nodes)
        flat_y = np.empty(self.n_nodes)
        flat_x[0], flat_y[0] = gx[0, 0], gy[0, 0]
        flat_x[1:] = gx[1:].ravel()
        flat_y[1:] = gy[1:].ravel()
        return flat_x, flat_y

    def nodes_in_region(self, region: int) -> np.ndarray:
        """All nodes with radius <= the region circle (interior + its boundary)."""
        ib = self.boundary_ring(region)
        return np.arange(0, 1 + ib * self.ntheta)


class CartGrid:
    """Uniform Cartesian grid on a rectangle, chain insets node-aligned."""

    def __init__(self, chain: DomainChain, nx: int, ny: int):
        rect = chain.shape
        if not isinstance(rect, Rect):
            raise GridError("CartGrid requires a rectangle domain")
        if nx < 2 or ny < 2:
            raise GridError(f"cartesian grid too coarse: nx={nx}, ny={ny}")
        hx = (rect.xmax - rect.xmin) / nx
        hy = (rect.ymax - rect.ymin) / ny
        if abs(hx - hy) > 1e-12 * max(hx, hy):
            raise GridError(f"grid spacing must be square, got hx={hx}, hy={hy}")
        self.chain = chain
        self.rect = rect
        self.nx = nx
        self.ny = ny
        self.h = hx
        self.n_nodes = (nx + 1) * (ny + 1)
        self._offset = {}
        for k in list(range(1, chain.depth + 1)) + [FULL]:
            m = 0.0 if k == FULL else chain.margin(k)
            self._offset[k] = _aligned_index(m, self.h, f"chain inset D_{k}")
        xs = rect.xmin + np.arange(nx + 1) * self.h
        ys = rect.ymin + np.arange(ny + 1) * self.h
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        self._xy = np.stack([X.ravel(), Y.ravel()], axis=1)
        self._lap = self._assemble_laplacian()

    def node_index(self, i, j) -> np.ndarray:
        return np.asarray(i) * (self.ny + 1) + np.asarray(j)

    @property
    def node_xy(self) -> np.ndarray:
        return self._xy

    def _region_bounds(self, region: int) -> tuple[int, int, int, int]:
        off = self._offset[region]
        return off, self.nx - off, off, self.ny - off

    def interior_nodes(self, region: int) -> np.ndarray:
        i0, i1, j0, j1 = self._region_bounds(region)
        if i1 - i0 < 2 or j1 - j0 < 2:
            raise GridError(f"region {region} has no interior nodes at this resolution")
        ii, jj = np.meshgrid(
            np.arange(i0 + 1, i1), np.arange(j0 + 1, j1), indexing="ij"
        )
        return self.node_index(ii.ravel(), jj.ravel())

    def boundary_nodes(self, region: int) -> np.ndarray:
        i0, i1, j0, j1 = self._region_bounds(region)
        top = self.node_index(np.arange(i0, i1 + 1), np.full(i1 - i0 + 1, j1))
        bot = self.node_index(np.arange(i0, i1 + 1), np.full(i1 - i0 + 1, j0))
        left = self.node_index(np.full(j1 - j0 - 1, i0), np.arange(j0 + 1, j1))
        right = self.node_index(np.full(j1 - j0 - 1, i1), np.arange(j0 + 1, j1))
        return np.concatenate([bot, top, left, right])

    def nodes_in_region(self, region: int) -> np.ndarray:
        i0, i1, j0, j1 = self._region_bounds(region)
        ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
        return self.node_index(ii.ravel(), jj.ravel())

    def _assemble_laplacian(self) -> sp.csr_matrix:
        n = self.n_nodes
        h2 = self.h**2
        ii, jj = np.meshgrid(
            np.arange(1, self.nx), np.arange(1, self.ny), indexing="ij"
        )
        me = self.node_index(ii.ravel(), jj.ravel())
        rows = np.repeat(me, 5)
        cols = np.stack(
            [
                me,
                self.node_index(ii.ravel() + 1, jj.ravel()),
                self.node_index(ii.ravel() - 1, jj.ravel()),
                self.node_index(ii.ravel(), jj.ravel() + 1),
                self.node_index(ii.ravel(), jj.ravel() - 1),
            ],
            axis=1,
        ).ravel()
        vals = np.tile(np.array([-4.0, 1.0, 1.0, 1.0, 1.0]) / h2, len(me))
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))

    @property
    def laplacian(self) -> sp.csr_matrix:
        return self._lap

    def apply_laplacian(self, values: np.ndarray) -> np.ndarray:
        """Difference-first 5-point Laplacian at all strictly interior nodes."""
        g = values.reshape(self.nx + 1, self.ny + 1)
        out = np.zeros((self.nx + 1, self.ny + 1))
        dxf = g[2:, 1:-1] - g[1:-1, 1:-1]
        dxb = g[1:-1, 1:-1] - g[:-2, 1:-1]
        dyf = g[1:-1, 2:] - g[1:-1, 1:-1]
        dyb = g[1:-1, 1:-1] - g[1:-1, :-2]
        out[1:-1, 1:-1] = ((dxf - dxb) + (dyf - dyb)) / self.h**2
        return out.ravel()

    def interp(self, values: np.ndarray, pts) -> np.ndarray:
        p = np.atleast_2d(np.asarray(pts, dtype=float))
        fx = np.clip((p[:, 0] - self.rect.xmin) / self.h, 0.0, self.nx - 1e-12)
        fy = np.clip((p[:, 1] - self.rect.ymin) / self.h, 0.0, self.ny - 1e-12)
        i0 = fx.astype(np.int64)
        j0 = fy.astype(np.int64)
        tx = fx - i0
        ty = fy - j0
        g = values.reshape(self.nx + 1, self.ny + 1)
        v00 = g[i0, j0]
        v10 = g[i0 + 1, j0]
        v01 = g[i0, j0 + 1]
        v11 = g[i0 + 1, j0 + 1]
        return (1 - tx) * ((1 - ty) * v00 + ty * v01) + tx * ((1 - ty) * v10 + ty * v11)

    def gradient(self, values: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        g = values.reshape(self.nx + 1, self.ny + 1)
        gx = np.gradient(g, self.h, axis=0)
        gy = np.gradient(g, self.h, axis=1)
        return gx.ravel(), gy.ravel()


Grid = PolarGrid | CartGrid


def make_grid(chain: DomainChain, *, refine: int = 1, base: int = 256) -> Grid:
    """Default grid for a chain: polar on disks, Cartesian on rectangles.

    refine multiplies the base resolution; the constructed resolution keeps
    every chain boundary node-aligned (or the constructor raises).
    """
    if refine < 1:
        raise GridError("refine must be >= 1")
    shape = chain.shape
    if isinstance(shape, Disk):
        # Radial count stays at half the angular count: the ring-1 rows carry
        # a 1/(dr * dtheta)^2 coefficient whose float64 rounding sets the
        # achievable residual floor, and this split keeps that floor well
        # under the solver tolerance at second-order accuracy.
        unit = 2**chain.depth
        nr = unit * max(1, round(base * refine / (2 * unit)))
        return PolarGrid(chain, nr=nr, ntheta=base * refine)
    if isinstance(shape, Rect):
        # Grid step must divide the finest inset and both side lengths.
        h0 = chain.scale * 2.0 ** (-chain.depth)
        span = min(shape.xmax - shape.xmin, shape.ymax - shape.ymin)
        q = max(1, int(np.ceil(0.75 * base * refine * h0 / span)))
        h = h0 / q
        nx = _aligned_index(shape.xmax - shape.xmin, h, "rectangle width")
        ny = _aligned_index(shape.ymax - shape.ymin, h, "rectangle height")
        if max(nx, ny) > 4096:
            raise GridError("grid would exceed 4096 cells per side; lower refine/depth")
        return CartGrid(chain, nx=nx, ny=ny)
    raise GeometryError(f"unsupported shape {shape!r}")
