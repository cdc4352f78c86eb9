"""Branching-particle approximation of exit measures and their functionals.

A population of particles of mass 1/n performs Brownian motion and critical
binary branching at rate beta * n (each event kills the particle or splits it
in two, equally likely); crossing a subdomain boundary freezes the particle's
mass there as an atom of that exit measure, and the frozen atoms restart to
produce the next exit measure in the chain.  An optional spatial kill field
annihilates particles at its local rate.

The branch-rate constant beta is fixed by a one-time calibration against the
deterministic solver (see verify.calibrate_beta); with the conventions used
here it sits at 4 up to discretization bias.  All estimators consume replica
chunks with seeded streams, so results are reproducible and worker-independent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .geometry import FULL, DomainChain
from .pde import ScalarField, solve_dirichlet, solve_linear
from .diffusion import local_dt, run_path_batch, _field_at
from . import stats
from .stats import EstimatorResult


class PopulationCapError(RuntimeError):
    """Too many replicas hit the population cap for a trustworthy estimate."""


@dataclass
class ExitMeasure:
    """Atomic measure on a region boundary: (point, mass) pairs."""

    k: int
    points: np.ndarray  # (m, 2)
    masses: np.ndarray  # (m,)

    def integrate(self, func) -> float:
        """<X, f> for a callable or field f evaluated at the atoms."""
        if len(self.masses) == 0:
            return 0.0
        return float(np.sum(self.masses * _field_at(func, self.points)))

    def total_mass(self) -> float:
        return float(np.sum(self.masses))


@dataclass
class ParticleCloud:
    """Live population snapshot: uniform particle mass, shared branch rate."""

    n: int
    beta: float
    positions: np.ndarray
    groups: np.ndarray

    @property
    def mass(self) -> float:
        return 1.0 / self.n

    @property
    def branch_rate(self) -> float:
        return self.beta * self.n

    @classmethod
    def initial(cls, x0, n: int, beta: float, nreps: int) -> "ParticleCloud":
        """nreps unit-mass replicas: n particles of mass 1/n at the start point."""
        start = np.asarray(x0, dtype=float)
        return cls(
            n=n,
            beta=beta,
            positions=np.repeat(start[None, :], n * nreps, axis=0),
            groups=np.repeat(np.arange(nreps), n),
        )


@dataclass(frozen=True)
class CloudParams:
    """Knobs of the particle system (resolution, rates, stepping, caps)."""

    n: int = 64
    beta: float = 4.0
    dt: float = 2e-3
    dt_min_factor: float = 1.0 / 64.0
    band: Optional[float] = None
    chunk: int = 256
    pop_cap: int = 10**6
    max_iters: int = 400_000

    def dt_min(self) -> float:
        return self.dt * self.dt_min_factor

    def band_for(self, chain: DomainChain) -> float:
        return 0.1 * chain.scale if self.band is None else self.band


@dataclass
class StageResult:
    """Atoms frozen on one region boundary plus per-replica bookkeeping."""

    points: np.ndarray
    groups: np.ndarray
    invalid: np.ndarray  # replicas that hit the population or step cap


def run_branching_stage(
    x: np.ndarray,
    groups: np.ndarray,
    nreps: int,
    chain: DomainChain,
    region: int,
    params: CloudParams,
    rng: np.random.Generator,
    kill_field: Optional[ScalarField] = None,
) -> StageResult:
    """Run the population inside one region until every particle resolves."""
    shape = chain.region(region)
    branch = params.beta * params.n
    dt, dt_min = params.dt, params.dt_min()
    band = params.band_for(chain)
    invalid = np.zeros(nreps, dtype=bool)
    out_pts = []
    out_grp = []
    x = np.array(x, dtype=float)
    groups = np.array(groups, dtype=np.int64)

    for _ in range(params.max_iters):
        if len(x) == 0:
            break
        counts = np.bincount(groups, minlength=nreps)
        over = counts > params.pop_cap
        if np.any(over):
            invalid |= over
            keep = ~over[groups]
            x, groups = x[keep], groups[keep]
            if len(x) == 0:
                break
        dist = shape.boundary_distance(x)
        dtl = local_dt(dist, dt, dt_min, band)
        rate = branch + (_field_at(kill_field, x) if kill_field is not None else 0.0)
        rate = np.asarray(rate, dtype=float)
        if np.ndim(rate) == 0:
            rate = np.full(len(x), float(rate))
        with np.errstate(divide="ignore"):
            ev = np.where(rate > 0.0, rng.exponential(size=len(x)) / np.maximum(rate, 1e-300), np.inf)
        dt_eff = np.minimum(dtl, ev)
        x_new = x + rng.normal(size=x.shape) * np.sqrt(dt_eff)[:, None]
        crossed, _, cpts = shape.segment_exit(x, x_new)
        if np.any(crossed):
            out_pts.append(cpts[crossed])
            out_grp.append(groups[crossed])
        event = (~crossed) & (ev <= dtl)
        # Event outcomes: split with prob branch/(2 rate), die otherwise
        # (branch-death and spatial kill both just remove the particle).
        u = rng.random(len(x))
        split = event & (u < 0.5 * branch / np.maximum(rate, 1e-300))
        cont = ~crossed & ~event
        x = np.concatenate([x_new[cont], x_new[split], x_new[split]])
        groups = np.concatenate([groups[cont], groups[split], groups[split]])
    else:
        # Step budget exhausted: flag the replicas still holding particles.
        invalid |= np.isin(np.arange(nreps), groups)
    pts = np.concatenate(out_pts) if out_pts else np.zeros((0, 2))
    grp = np.concatenate(out_grp) if out_grp else np.zeros(0, dtype=np.int64)
    if np.any(invalid):
        keep = ~invalid[grp]
        pts, grp = pts[keep], grp[keep]
    return StageResult(points=pts, groups=grp, invalid=invalid)


def run_exit_chain(
    x0,
    nreps: int,
    chain: DomainChain,
    params: CloudParams,
    rng: np.random.Generator,
    *,
    kill_field: Optional[ScalarField] = None,
    through_full_domain: bool = False,
    k_max: Optional[int] = None,
) -> tuple[dict, np.ndarray]:
    """Chain of exit stages for a batch of replicas started from one point.

    Returns ({k: StageResult}, invalid mask); the full-domain stage, when
    requested, is stored under the FULL key.
    """
    k_top = chain.depth if k_max is None else k_max
    cloud = ParticleCloud.initial(x0, params.n, params.beta, nreps)
    x, groups = cloud.positions, cloud.groups
    stages: dict = {}
    invalid = np.zeros(nreps, dtype=bool)
    regions = list(range(1, k_top + 1)) + ([FULL] if through_full_domain else [])
    for reg in regions:
        res = run_branching_stage(x, groups, nreps, chain, reg, params, rng, kill_field)
        invalid |= res.invalid
        stages[reg] = res
        x, groups = res.points, res.groups
    return stages, invalid


def simulate_sbm(
    x0,
    n: int,
    chain: DomainChain,
    kill_field: Optional[ScalarField],
    dt: float,
    rng: np.random.Generator,
    *,
    beta: float = 4.0,
    pop_cap: int = 10**6,
    through_full_domain: bool = False,
) -> list[ExitMeasure]:
    """One replica of the exit-measure chain; returns an ExitMeasure per k."""
    params = CloudParams(n=n, beta=beta, dt=dt, pop_cap=pop_cap)
    stages, invalid = run_exit_chain(
        x0, 1, chain, params, rng, kill_field=kill_field,
        through_full_domain=through_full_domain,
    )
    if invalid[0]:
        raise PopulationCapError("replica exceeded the population cap")
    mass = 1.0 / n
    out = []
    for reg, res in stages.items():
        out.append(ExitMeasure(k=reg, points=res.points,
                               masses=np.full(len(res.points), mass)))
    return out


# ----------------------------------------------------------------------------
# Replica-chunked estimators


def _pairings_by_replica(stage: StageResult, nreps: int, func, mass: float) -> np.ndarray:
    """Per-replica <X, f> over atoms of one stage."""
    acc = np.zeros(nreps)
    if len(stage.groups):
        np.add.at(acc, stage.groups, mass * _field_at(func, stage.points))
    return acc


def _run_chunks(
    x0,
    chain: DomainChain,
    params: CloudParams,
    reps: int,
    seed: int,
    stream: int,
    collect: Callable,
    *,
    kill_field=None,
    through_full_domain: bool = False,
    k_max: Optional[int] = None,
    max_invalid_frac: float = 1e-3,
    workers: int = 1,
):
    """Run replicas chunk by chunk; collect maps (stages, nreps) -> columns."""

    def one(job):
        ci, size = job
        rng = stats.rng_stream(seed, stats.STREAM_CLOUD, stream, ci)
        stages, invalid = run_exit_chain(
            x0, size, chain, params, rng,
            kill_field=kill_field, through_full_domain=through_full_domain,
            k_max=k_max,
        )
        cols = collect(stages, size)
        return np.asarray(cols)[..., ~invalid], int(np.sum(invalid))

    jobs = list(enumerate(stats.chunk_sizes(reps, params.chunk)))
    pieces = stats.forked_map(one, jobs, workers)
    n_invalid = sum(inv for _, inv in pieces)
    if n_invalid > max_invalid_frac * reps:
        raise PopulationCapError(
            f"{n_invalid}/{reps} replicas hit the population/step cap"
        )
    return np.concatenate([c for c, _ in pieces], axis=-1), n_invalid


def estimate_w(
    x0,
    psi,
    k: int,
    reps: int,
    seed: int,
    chain: DomainChain,
    params: CloudParams,
    *,
    kill_field: Optional[ScalarField] = None,
    stream: int = 0,
    workers: int = 1,
) -> EstimatorResult:
    """Estimate the exponential-functional exponent at a point.

    Runs the particle system to the k-th boundary and returns
    -log(mean of exp(-<X_k, psi>)) with a delta-method standard error.
    """
    mass = 1.0 / params.n

    def collect(stages, nreps):
        pair = _pairings_by_replica(stages[k], nreps, psi, mass)
        return np.exp(-pair)

    samples, _ = _run_chunks(
        x0, chain, params, reps, seed, stream, collect,
        kill_field=kill_field, k_max=k, workers=workers,
    )
    return stats.log_mean_estimate(samples, seed=seed)


def estimate_hitting(
    x0,
    arcs: Sequence[tuple],
    reps: int,
    seed: int,
    chain: DomainChain,
    params: CloudParams,
    *,
    stream: int = 1,
    workers: int = 1,
) -> EstimatorResult:
    """Exponent of the probability that the range charges a boundary arc set.

    Hits are read off the ambient-boundary exit measure: an empty arc set can
    never be hit; a hit frequency of 1 has an infinite exponent and raises.
    """
    from .pde import arc_indicator_data

    if not arcs:
        return EstimatorResult(0.0, 0.0, reps, seed=seed)
    indicator = arc_indicator_data(chain.shape, arcs, 1.0)

    def collect(stages, nreps):
        st = stages[FULL]
        hit = np.zeros(nreps)
        if len(st.groups):
            np.add.at(hit, st.groups, indicator(st.points))
        return (hit > 0).astype(float)

    freq, _ = _run_chunks(
        x0, chain, params, reps, seed, stream, collect,
        through_full_domain=True, workers=workers,
    )
    m, se = stats.mean_se(freq)
    if m >= 1.0:
        raise ValueError("hit frequency is 1; increase n or shrink the arcs")
    return EstimatorResult(-np.log1p(-m), se / (1.0 - m), len(freq), seed=seed)


def palm_first_moment_check(
    x0,
    phi,
    psi,
    k: int,
    reps: int,
    seed: int,
    chain: DomainChain,
    grid,
    params: CloudParams,
    workers: int = 1,
) -> dict:
    """First-moment identity: cloud-side <X, phi> under the exp weight vs a
    weighted Brownian exit average with the deterministic exponent field."""
    mass = 1.0 / params.n

    def collect(stages, nreps):
        st = stages[k]
        a = _pairings_by_replica(st, nreps, phi, mass)
        e = np.exp(-_pairings_by_replica(st, nreps, psi, mass))
        return np.stack([a * e, e])

    cols, _ = _run_chunks(x0, chain, params, reps, seed, 2, collect, k_max=k,
                          workers=workers)
    lhs = stats.ratio_estimate(cols[0], cols[1], seed=seed)

    w_psi = solve_dirichlet(grid, k, psi)
    weight = w_psi.copy_with(4.0 * w_psi.values)
    rng = stats.rng_stream(seed, stats.STREAM_PATHS, 7)
    batch = run_path_batch(
        np.repeat(np.asarray(x0, dtype=float)[None, :], reps, axis=0),
        chain, k, params.dt, rng, weight=weight,
        dt_min=params.dt_min(), band=params.band_for(chain),
    )
    vals = _field_at(phi, batch.exit_points) * np.exp(-batch.weight_integral)
    rhs = stats.estimate(vals, seed=seed)
    return {"cloud": lhs, "paths": rhs, "gap_se": lhs.combined_gap(rhs)}


def palm_two_point_check(
    x0,
    phi,
    psi1,
    psi2,
    k: int,
    reps: int,
    seed: int,
    chain: DomainChain,
    grid,
    params: CloudParams,
    workers: int = 1,
) -> dict:
    """Two-point moment identity for the exit measure.

    Cloud side: the centered product moment of <X, psi1>, <X, psi2> under the
    exp(-<X, phi>) weight, which removes the product of first moments added by
    the Poisson superposition of excursions.  Path side: a Brownian average of
    the product of the two killed harmonic extensions along the path, with the
    running exponential weight; both sides carry Monte Carlo errors.
    """
    mass = 1.0 / params.n

    def collect(stages, nreps):
        st = stages[k]
        a = _pairings_by_replica(st, nreps, psi1, mass)
        b = _pairings_by_replica(st, nreps, psi2, mass)
        e = np.exp(-_pairings_by_replica(st, nreps, phi, mass))
        return np.stack([a * b * e, a * e, b * e, e])

    cols, _ = _run_chunks(x0, chain, params, reps, seed, 3, collect, k_max=k,
                          workers=workers)

    def centered(abe, ae, be, e):
        me = np.mean(e)
        return np.mean(abe) / me - (np.mean(ae) / me) * (np.mean(be) / me)

    lhs = stats.batch_statistic(cols, centered, seed=seed)

    w_phi = solve_dirichlet(grid, k, phi)
    kill4 = w_phi.copy_with(4.0 * w_phi.values)
    f1 = solve_linear(grid, k, kill4, None, psi1)
    f2 = solve_linear(grid, k, kill4, None, psi2)
    payload = f1.copy_with(4.0 * f1.values * f2.values)
    rng = stats.rng_stream(seed, stats.STREAM_PATHS, 8)
    batch = run_path_batch(
        np.repeat(np.asarray(x0, dtype=float)[None, :], reps, axis=0),
        chain, k, params.dt, rng, weight=kill4, payload=payload,
        dt_min=params.dt_min(), band=params.band_for(chain),
    )
    rhs = stats.estimate(batch.payload_integral, seed=seed)
    return {"cloud": lhs, "paths": rhs, "gap_se": lhs.combined_gap(rhs)}


def exp_moment_diag(
    x0,
    lam: float,
    k: int,
    reps: int,
    seed: int,
    chain: DomainChain,
    params: CloudParams,
) -> EstimatorResult:
    """Diagnostic for the exponential moment of the total exit mass.

    Estimates E[exp(lam <X_k, 1>)] - 1; overflow at large lam is reported as
    divergence (only small lam is guaranteed finite).
    """
    if lam < 0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    mass = 1.0 / params.n

    def collect(stages, nreps):
        tot = _pairings_by_replica(stages[k], nreps, lambda p: np.ones(len(p)), mass)
        with np.errstate(over="ignore"):
            return np.expm1(lam * tot)

    samples, _ = _run_chunks(x0, chain, params, reps, seed, 4, collect, k_max=k)
    if not np.all(np.isfinite(samples)):
        return EstimatorResult(float("inf"), float("inf"), reps, seed=seed)
    return stats.estimate(samples, seed=seed)
