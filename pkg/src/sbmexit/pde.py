"""Finite-difference solver for the semilinear equation Lap(u) = 4 u^2.

All fields in the package live on one shared grid per experiment (polar on a
disk, Cartesian on a rectangle; see grids.py) and are represented by nodal
values over the whole grid: solution values on the interior of the solve
region, Dirichlet data on its boundary nodes, and a constant radial/clamped
extension outside, so bilinear interpolation is defined everywhere paths can
reach.

The nonlinear solve is damped Newton on F(u) = Lap_h(u) - 4 u^2 with Jacobian
Lap_h - 8 diag(u), started from the harmonic extension of the boundary data.
Starting above the solution this iteration is monotone decreasing, so damping
only ever engages as a safeguard.  The Laplacian convention is Lap(u) = 4 u^2;
the equivalent form (1/2) Lap(u) = 2 u^2 is used when quoting generator kill
rates elsewhere.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import FULL, Disk, DomainChain, Rect, build_chain
from .grids import CartGrid, Grid, PolarGrid

BoundaryData = Union[Callable[[np.ndarray], np.ndarray], np.ndarray, float]


class SolveError(RuntimeError):
    """Newton non-convergence or a singular linear solve."""


class BoundaryDataError(ValueError):
    """Negative or malformed Dirichlet data."""


@dataclass
class ScalarField:
    """Nodal grid function tied to a solve region of the chain."""

    grid: Grid
    values: np.ndarray
    region: int
    name: str = ""
    residual: float = float("nan")

    def interp(self, pts) -> np.ndarray:
        return self.grid.interp(self.values, pts)

    def __call__(self, pts) -> np.ndarray:
        return self.interp(pts)

    def at(self, x, y) -> float:
        return float(self.interp(np.array([[x, y]]))[0])

    def max(self) -> float:
        return float(np.max(self.values))

    def min(self) -> float:
        return float(np.min(self.values))

    def copy_with(self, values: np.ndarray, name: str = "") -> "ScalarField":
        return ScalarField(self.grid, values, self.region, name or self.name)

    @staticmethod
    def from_function(grid: Grid, fn: Callable[[np.ndarray], np.ndarray],
                      region: int = FULL, name: str = "") -> "ScalarField":
        vals = np.asarray(fn(grid.node_xy), dtype=float)
        return ScalarField(grid, vals, region, name)

    @staticmethod
    def constant(grid: Grid, value: float, region: int = FULL, name: str = "") -> "ScalarField":
        return ScalarField(grid, np.full(grid.n_nodes, float(value)), region, name)


@dataclass
class VectorField:
    """Nodal planar vector field (used for transform drifts)."""

    grid: Grid
    vx: np.ndarray
    vy: np.ndarray

    def interp(self, pts) -> np.ndarray:
        return np.stack(
            [self.grid.interp(self.vx, pts), self.grid.interp(self.vy, pts)], axis=1
        )


def _eval_boundary_data(grid: Grid, region: int, data: BoundaryData) -> np.ndarray:
    bnodes = grid.boundary_nodes(region)
    if callable(data):
        vals = np.asarray(data(grid.node_xy[bnodes]), dtype=float)
        if vals.shape != bnodes.shape:
            vals = np.broadcast_to(vals, bnodes.shape).astype(float)
    elif np.ndim(data) == 0:
        vals = np.full(len(bnodes), float(data))
    else:
        vals = np.asarray(data, dtype=float)
        if vals.shape != bnodes.shape:
            raise BoundaryDataError(
                f"boundary value array has shape {vals.shape}, expected {bnodes.shape}"
            )
    if np.min(vals) < -1e-12:
        raise BoundaryDataError(f"negative boundary data (min {np.min(vals)})")
    return np.maximum(vals, 0.0)


def _extend_outside(grid: Grid, region: int, values: np.ndarray) -> None:
    """Fill nodes outside the region with their boundary-projected value."""
    if isinstance(grid, PolarGrid):
        ib = grid.boundary_ring(region)
        if ib == grid.nr:
            return
        ring = values[1 + (ib - 1) * grid.ntheta : 1 + ib * grid.ntheta]
        for i in range(ib + 1, grid.nr + 1):
            values[1 + (i - 1) * grid.ntheta : 1 + i * grid.ntheta] = ring
    else:
        i0, i1, j0, j1 = grid._region_bounds(region)
        if i0 == 0 and j0 == 0 and i1 == grid.nx and j1 == grid.ny:
            return
        g = values.reshape(grid.nx + 1, grid.ny + 1)
        inner = g[i0 : i1 + 1, j0 : j1 + 1].copy()
        ii = np.clip(np.arange(grid.nx + 1), i0, i1) - i0
        jj = np.clip(np.arange(grid.ny + 1), j0, j1) - j0
        g[:, :] = inner[np.ix_(ii, jj)]
        values[:] = g.ravel()


def _system(grid: Grid, region: int):
    lap = grid.laplacian
    inodes = grid.interior_nodes(region)
    bnodes = grid.boundary_nodes(region)
    a_ii = lap[inodes][:, inodes].tocsc()
    a_ib = lap[inodes][:, bnodes].tocsc()
    return inodes, bnodes, a_ii, a_ib


def solve_dirichlet(
    grid: Grid,
    region: int,
    boundary_data: BoundaryData,
    *,
    tol: float = 1e-11,
    floor_tol: float = 5e-9,
    max_iter: int = 100,
    name: str = "",
) -> ScalarField:
    """Solve Lap(w) = 4 w^2 on the region with nonnegative Dirichlet data.

    The stored residual is ||Lap_h w - 4 w^2||_inf over interior nodes,
    evaluated difference-first.  Newton aims for tol * (1 + ||w||_inf); when
    it stalls at the float64 rounding floor of the operator it accepts the
    iterate only below floor_tol * (1 + ||w||_inf), half the solver
    tolerance contract, and fails loudly otherwise.
    """
    inodes, bnodes, a_ii, a_ib = _system(grid, region)
    bvals = _eval_boundary_data(grid, region, boundary_data)
    rhs_b = a_ib @ bvals
    lu = spla.splu(a_ii)
    u = np.maximum(lu.solve(-rhs_b), 0.0)  # harmonic extension: supersolution

    values = np.zeros(grid.n_nodes)
    values[bnodes] = bvals

    def resid(uv: np.ndarray) -> np.ndarray:
        values[inodes] = uv
        return grid.apply_laplacian(values)[inodes] - 4.0 * uv * uv

    f = resid(u)
    norm = float(np.max(np.abs(f)))
    converged = False
    for _ in range(max_iter):
        scale = 1.0 + float(np.max(np.abs(u)))
        target = tol * scale
        if norm < target:
            converged = True
            break
        jac = (a_ii - sp.diags(8.0 * u)).tocsc()
        try:
            delta = spla.splu(jac).solve(-f)
        except RuntimeError as e:
            raise SolveError(f"singular Newton system: {e}") from e
        alpha = 1.0
        improved = False
        for _ in range(40):
            u_try = u + alpha * delta
            f_try = resid(u_try)
            n_try = float(np.max(np.abs(f_try)))
            if n_try < max(norm * (1.0 - 0.25 * alpha), target):
                improved = True
                break
            alpha *= 0.5
        if not improved:
            # Rounding floor reached; accept only below the hard contract.
            if norm < floor_tol * scale:
                converged = True
                break
            raise SolveError(
                f"Newton stalled at residual {norm:.3e} (region {region})"
            )
        u, f, norm = u_try, f_try, n_try
    if not converged and not norm < tol * (1.0 + float(np.max(np.abs(u)))):
        raise SolveError(
            f"Newton did not converge in {max_iter} iterations "
            f"(residual {norm:.3e}, region {region})"
        )
    mx = max(float(np.max(bvals)), 0.0)
    if np.min(u) < -1e-10 or np.max(u) > mx + 1e-10 * (1.0 + mx):
        raise SolveError("maximum principle violated; discretization suspect")
    values[inodes] = np.maximum(u, 0.0)
    _extend_outside(grid, region, values)
    fld = ScalarField(grid, values, region, name)
    fld.residual = norm
    return fld


def arc_indicator_data(shape, arcs: Sequence[tuple], cap: float) -> Callable:
    """Dirichlet data equal to cap on the given boundary arcs and 0 elsewhere.

    Arcs are (s0, s1) intervals of the boundary parameter (angle for a disk,
    counterclockwise arclength for a rectangle); wrap-around intervals are
    allowed for disks via s0 > s1.
    """
    period = 2.0 * np.pi if isinstance(shape, Disk) else shape.perimeter

    def data(pts: np.ndarray) -> np.ndarray:
        s = shape.boundary_param(pts)
        hit = np.zeros(len(s), dtype=bool)
        for s0, s1 in arcs:
            if s1 - s0 >= period:
                hit[:] = True
                continue
            a = np.mod(s0, period)
            b = np.mod(s1, period)
            if a <= b:
                hit |= (s >= a) & (s <= b)
            else:
                hit |= (s >= a) | (s <= b)
        return np.where(hit, float(cap), 0.0)

    return data


def solve_blowup(
    grid: Grid,
    arcs: Sequence[tuple],
    cap: float,
    region: int = FULL,
    *,
    name: str = "",
) -> ScalarField:
    """Capped approximation of the boundary-singular solution on an arc set."""
    if cap < 0:
        raise BoundaryDataError(f"cap must be >= 0, got {cap}")
    shape = grid.chain.region(region)
    return solve_dirichlet(
        grid, region, arc_indicator_data(shape, arcs, cap), name=name
    )


def solve_linear(
    grid: Grid,
    region: int,
    kill: Optional[ScalarField],
    source: Optional[ScalarField],
    boundary_data: BoundaryData,
    *,
    name: str = "",
) -> ScalarField:
    """Solve (1/2) Lap(w) - kill * w = -source with Dirichlet data.

    kill and source are nodal fields (None means 0).  Used for harmonic
    extensions under killing and for the potential operator.
    """
    inodes, bnodes, a_ii, a_ib = _system(grid, region)
    bvals = _eval_boundary_data(grid, region, boundary_data)
    c = np.zeros(len(inodes)) if kill is None else kill.values[inodes]
    f = np.zeros(len(inodes)) if source is None else source.values[inodes]
    # Multiply through by 2: Lap w - 2c w = -2f.
    mat = (a_ii - sp.diags(2.0 * c)).tocsc()
    try:
        lu = spla.splu(mat)
    except RuntimeError as e:
        raise SolveError(f"singular linear system: {e}") from e
    w = lu.solve(-2.0 * f - a_ib @ bvals)
    values = np.zeros(grid.n_nodes)
    values[bnodes] = bvals

    def resid(wv: np.ndarray) -> np.ndarray:
        values[inodes] = wv
        return 0.5 * grid.apply_laplacian(values)[inodes] - c * wv + f

    # One step of iterative refinement takes the residual to the rounding
    # floor of the difference-first evaluation.
    r = resid(w)
    w = w - lu.solve(2.0 * r)
    r = resid(w)
    values[inodes] = w
    _extend_outside(grid, region, values)
    fld = ScalarField(grid, values, region, name)
    fld.residual = float(np.max(np.abs(r)))
    return fld


def potential_operator(
    grid: Grid,
    kill_field: Optional[ScalarField],
    source: ScalarField,
    region: int = FULL,
    *,
    name: str = "",
) -> ScalarField:
    """Solve (1/2) Lap(w) - 4 g w = -f with w = 0 on the region boundary."""
    kill4 = None
    if kill_field is not None:
        kill4 = kill_field.copy_with(4.0 * kill_field.values)
    w = solve_linear(grid, region, kill4, source, 0.0, name=name)
    if np.min(w.values) < -1e-10 * (1.0 + w.max()):
        raise SolveError("potential came out negative; kill/source invalid")
    w.values = np.maximum(w.values, 0.0)
    return w


def grad_log(field: ScalarField, floor: float = 1e-12) -> VectorField:
    """Gradient of log(max(field, floor)); finite everywhere by construction."""
    if floor <= 0.0:
        raise ValueError("floor must be positive")
    logv = np.log(np.maximum(field.values, floor))
    gx, gy = field.grid.gradient(logv)
    return VectorField(field.grid, gx, gy)


def residual_semilinear(field: ScalarField) -> float:
    """||Lap_h w - 4 w^2||_inf over interior nodes of the field's region."""
    grid = field.grid
    inodes = grid.interior_nodes(field.region)
    r = grid.apply_laplacian(field.values)[inodes] - 4.0 * field.values[inodes] ** 2
    return float(np.max(np.abs(r)))


def markov_nesting_check(
    grid: Grid, psi: BoundaryData, j: int, k: int
) -> float:
    """Nested-solve consistency: solve on D_k, restrict to bd(D_j), re-solve.

    Returns ||w_k - w_j||_inf over the interior of D_j; with chain-aligned
    grids the restriction uses exact nodal values, so the residual is at the
    level of the Newton tolerance.
    """
    if not j < k:
        raise ValueError(f"need j < k, got j={j}, k={k}")
    w_k = solve_dirichlet(grid, k, psi)
    data_j = w_k.values[grid.boundary_nodes(j)]
    w_j = solve_dirichlet(grid, j, data_j)
    inner = grid.interior_nodes(j)
    return float(np.max(np.abs(w_k.values[inner] - w_j.values[inner])))


# ----------------------------------------------------------------------------
# CSV round trip


def _chain_meta(chain: DomainChain) -> dict:
    s = chain.shape
    if isinstance(s, Disk):
        dom = {"type": "disk", "center": [s.cx, s.cy], "radius": s.radius}
    else:
        dom = {"type": "rect", "xmin": s.xmin, "xmax": s.xmax,
               "ymin": s.ymin, "ymax": s.ymax}
    return {"domain": dom, "depth": chain.depth, "scale": chain.scale}


def _grid_meta(grid: Grid) -> dict:
    if isinstance(grid, PolarGrid):
        return {"kind": "polar", "nr": grid.nr, "ntheta": grid.ntheta,
                "h": grid.dr}
    return {"kind": "cart", "nx": grid.nx, "ny": grid.ny, "h": grid.h}


def save_field_csv(field: ScalarField, path, extra: Optional[dict] = None) -> None:
    """Write a field as '# header-json' then x,y,value rows in node order."""
    header = {
        "schema": 1,
        **_chain_meta(field.grid.chain),
        "grid": _grid_meta(field.grid),
        "region": field.region,
        "name": field.name,
        **(extra or {}),
    }
    xy = field.grid.node_xy
    with open(path, "w") as fh:
        fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        fh.write("x,y,value\n")
        for (x, y), v in zip(xy, field.values):
            fh.write(f"{float(x)!r},{float(y)!r},{float(v)!r}\n")


def load_field_csv(path) -> ScalarField:
    """Rebuild a field saved by save_field_csv, bit-exactly."""
    with open(path) as fh:
        header = json.loads(fh.readline().lstrip("# ").strip())
        if header.get("schema") != 1:
            raise ValueError(f"unsupported field file schema in {path}")
        fh.readline()  # column header
        vals = [float(line.rstrip("\n").split(",")[2]) for line in fh if line.strip()]
    dom = header["domain"]
    if dom["type"] == "disk":
        shape = Disk(dom["center"][0], dom["center"][1], dom["radius"])
    else:
        shape = Rect(dom["xmin"], dom["xmax"], dom["ymin"], dom["ymax"])
    chain = build_chain(shape, header["depth"], header["scale"])
    g = header["grid"]
    if g["kind"] == "polar":
        grid: Grid = PolarGrid(chain, nr=g["nr"], ntheta=g["ntheta"])
    else:
        grid = CartGrid(chain, nx=g["nx"], ny=g["ny"])
    values = np.array(vals, dtype=float)
    if len(values) != grid.n_nodes:
        raise ValueError(
            f"{path}: {len(values)} values for a grid with {grid.n_nodes} nodes"
        )
    return ScalarField(grid, values, header["region"], header.get("name", ""))
