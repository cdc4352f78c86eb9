"""Immigration of mass along backbone trees and the transform evaluators.

Given a backbone tree, mass immigrates as a Poisson cloud of excursion
clusters seeded along every branch at rate 4 per unit (tree time x cluster
intensity); the clusters evolve like the exit-measure particle system but
with spatial killing at four times the plan's kill field, which is exactly
the cluster law whose exponent functional is w_{phi+kill} - kill.  The
conditional Laplace functional given the tree is therefore

    exp( - sum over branches of int 4 (w_shift - kill)(path(s)) ds ),

with w_shift the deterministic solve with boundary data phi + kill; this is
what laplace_semi_analytic evaluates, and realize_Y must reproduce it within
Monte Carlo error (the self-consistency gate for the seeding constants).

The deterministic side of each theorem check lives here too: the pair
transform value (w_{phi+g} - w_{phi+u}) / v and the tagged-family value
-(sum over subsets of signed w_{phi+u^A}) / v_N, both built from cached
Dirichlet solves.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np

from .geometry import DomainChain
from .grids import Grid
from .pde import ScalarField, solve_dirichlet
from .diffusion import _field_at
from .backbone import BackboneTree, PairFields
from .subsets import SubsetFamily, popcount, subsets_of
from .superprocess import CloudParams, run_branching_stage
from . import stats


class ImmigrationError(ValueError):
    """Inconsistent plan fields (comparison principle violated)."""


@dataclass
class ImmigrationPlan:
    """A tree, the kill field its mass feels, the target region, and phi."""

    tree: BackboneTree
    kill_field: ScalarField
    k: int
    phi: Callable

    def shifted_boundary_data(self) -> Callable:
        kill = self.kill_field

        def data(pts: np.ndarray) -> np.ndarray:
            return _field_at(self.phi, pts) + kill.interp(pts)

        return data


def immigration_integrand(plan: ImmigrationPlan, w_shift: ScalarField) -> ScalarField:
    """The field 4 (w_shift - kill), validated against the comparison principle."""
    diff = w_shift.values - plan.kill_field.values
    scale = 1.0 + float(np.max(np.abs(w_shift.values)))
    inner = w_shift.grid.nodes_in_region(plan.k)
    if np.min(diff[inner]) < -1e-8 * scale:
        raise ImmigrationError(
            f"shifted solve dips below the kill field by {-np.min(diff[inner]):.2e}"
        )
    vals = np.maximum(4.0 * diff, 0.0)
    return w_shift.copy_with(vals, name="immigration-integrand")


def laplace_semi_analytic(plan: ImmigrationPlan, w_shift: ScalarField) -> float:
    """Conditional Laplace functional of the immigrated exit measure given the tree."""
    integrand = immigration_integrand(plan, w_shift)
    total = 0.0
    for node in plan.tree.nodes:
        if node.times is None:
            raise ImmigrationError("semi-analytic evaluation needs recorded paths")
        total += path_integral_node(node, integrand)
    return float(np.exp(-total))


def path_integral_node(node, field: ScalarField) -> float:
    if node.times is None or len(node.times) < 2:
        return 0.0
    vals = field.interp(node.points[:-1])
    return float(np.sum(vals * np.diff(node.times)))


def realize_Y(
    plan: ImmigrationPlan,
    n: int,
    rng: np.random.Generator,
    chain: DomainChain,
    params: Optional[CloudParams] = None,
):
    """One realization of the immigrated exit measure along the plan's tree."""
    from .superprocess import ExitMeasure

    pts, grp, _ = _realize_batch(plan, n, 1, rng, chain, params)
    return ExitMeasure(k=plan.k, points=pts, masses=np.full(len(pts), 1.0 / n))


def realize_Y_values(
    plan: ImmigrationPlan,
    n: int,
    reps: int,
    rng: np.random.Generator,
    chain: DomainChain,
    params: Optional[CloudParams] = None,
) -> np.ndarray:
    """Per-realization pairings <Y, phi> for a batch of realizations."""
    pts, grp, invalid = _realize_batch(plan, n, reps, rng, chain, params)
    acc = np.zeros(reps)
    if len(grp):
        np.add.at(acc, grp, _field_at(plan.phi, pts) / n)
    if np.any(invalid):
        acc[invalid] = np.nan
    return acc


def _realize_batch(plan, n, reps, rng, chain, params):
    params = params or CloudParams(n=n)
    seed_rate = 4.0 * n  # continuum intensity 4 at cluster resolution n
    starts = []
    groups = []
    for node in plan.tree.nodes:
        if node.times is None:
            raise ImmigrationError("realization needs recorded paths")
        if len(node.times) < 2:
            continue
        dts = np.diff(node.times)
        counts = rng.poisson(seed_rate * dts[None, :].repeat(reps, axis=0))
        rows, cols = np.nonzero(counts)
        if len(rows):
            reps_counts = counts[rows, cols]
            starts.append(np.repeat(node.points[cols], reps_counts, axis=0))
            groups.append(np.repeat(rows, reps_counts))
    if not starts:
        return np.zeros((0, 2)), np.zeros(0, dtype=np.int64), np.zeros(reps, bool)
    x = np.concatenate(starts)
    grp = np.concatenate(groups).astype(np.int64)
    kill4 = plan.kill_field.copy_with(4.0 * plan.kill_field.values)
    res = run_branching_stage(
        x, grp, reps, chain, plan.k, params, rng, kill_field=kill4
    )
    return res.points, res.groups, res.invalid


def immigration_consistency(
    plan: ImmigrationPlan,
    w_shift: ScalarField,
    n: int,
    reps: int,
    seed: int,
    chain: DomainChain,
    params: Optional[CloudParams] = None,
) -> dict:
    """Empirical Laplace functional of realizations vs the semi-analytic value."""
    target = laplace_semi_analytic(plan, w_shift)
    rng = stats.rng_stream(seed, stats.STREAM_IMMIGRATION, 0)
    vals = realize_Y_values(plan, n, reps, rng, chain, params)
    ok = np.isfinite(vals)
    est = stats.estimate(np.exp(-vals[ok]), seed=seed)
    gap = abs(est.mean - target) / est.se if est.se > 0 else 0.0
    return {"semi_analytic": target, "empirical": est, "gap_se": gap,
            "invalid": int(np.sum(~ok))}


# ----------------------------------------------------------------------------
# Deterministic transform evaluators (cached Dirichlet solves)


class FieldCache:
    """Dirichlet solves keyed by (region, content hash of the boundary data)."""

    def __init__(self, grid: Grid):
        self.grid = grid
        self._store: Dict[tuple, ScalarField] = {}

    def solve(self, region: int, data: Callable, label: str = "") -> ScalarField:
        bxy = self.grid.node_xy[self.grid.boundary_nodes(region)]
        vals = np.asarray(data(bxy), dtype=float)
        key = (region, hashlib.sha256(np.round(vals, 14).tobytes()).hexdigest())
        if key not in self._store:
            self._store[key] = solve_dirichlet(self.grid, region, vals, name=label)
        return self._store[key]


def _shift_data(phi, base: Optional[ScalarField]) -> Callable:
    def data(pts: np.ndarray) -> np.ndarray:
        out = _field_at(phi, pts)
        if base is not None:
            out = out + base.interp(pts)
        return out

    return data


def pair_laplace_pde(
    x0,
    phi,
    k: int,
    fields: PairFields,
    cache: FieldCache,
) -> float:
    """Deterministic Laplace functional of the pair transform at a point.

    Two shifted solves and a division: (w_{phi+g} - w_{phi+u}) / v(x); equals
    1 at phi = 0 and decreases toward the fully-shifted limit as phi grows.
    """
    x = np.asarray(x0, dtype=float)[None, :]
    v = float(fields.v_field().interp(x)[0])
    if v <= 0.0:
        raise ValueError("the gap field vanishes at the evaluation point")
    w_g = cache.solve(k, _shift_data(phi, fields.g), "shift-g")
    w_u = cache.solve(k, _shift_data(phi, fields.u), "shift-u")
    return float((w_g.interp(x)[0] - w_u.interp(x)[0]) / v)


def tagged_laplace_pde(
    x0,
    phi,
    k: int,
    ufam: SubsetFamily,
    cache: FieldCache,
) -> float:
    """Deterministic Laplace functional of the tagged-family transform.

    Alternating sum of shifted solves over all subsets (the empty subset
    contributes the plain phi solve), normalized by the full joint field.
    """
    from .subsets import v_from_u

    x = np.asarray(x0, dtype=float)[None, :]
    vfam = v_from_u(SubsetFamily(ufam.n, {
        m: ufam[m].values for m in ufam.masks()
    }), check=True, tol=-1e-9)
    v_n = float(ufam[ufam.full_mask].grid.interp(vfam[ufam.full_mask], x)[0])
    if v_n <= 0.0:
        raise ValueError("the full joint field vanishes at the evaluation point")
    total = 0.0
    for mask in subsets_of(ufam.full_mask):
        base = None if mask == 0 else ufam[mask]
        w = cache.solve(k, _shift_data(phi, base), f"shift-{mask}")
        total += (-1.0) ** popcount(mask) * float(w.interp(x)[0])
    return float(-total / v_n)
