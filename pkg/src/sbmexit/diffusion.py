"""Discretized Brownian motion, killed motion, and drift-transformed motion.

One Euler step advances a particle by min(adaptive step, next event time):
the step shrinks quadratically with the distance to the active region's
boundary (down to dt_min), and event times are exponential with the local
total rate, which is exact for rates frozen over a step.  Boundary crossings
are resolved by exact segment/boundary intersection, never bisection.

Drift transforms are simulated pathwise: drift grad log h plus residual
killing at the caller-supplied rate.  Terminal states distinguish exiting the
region, interior killing, branching (when a branch clock is attached by a
caller), step-budget caps and drift-overflow aborts; every formula built on
top selects the terminal states it needs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import DomainChain
from .pde import ScalarField, VectorField, grad_log

TERMINAL_EXITED = "exited"
TERMINAL_KILLED = "killed"
TERMINAL_BRANCHED = "branched"
TERMINAL_CAPPED = "capped"
TERMINAL_ABORTED = "aborted"

DRIFT_CAP = 1e8  # |drift| beyond this means the floor was engaged over a region


@dataclass
class ParticlePath:
    """A recorded trajectory: vertex times/points and how it ended."""

    dt: float
    times: np.ndarray
    points: np.ndarray
    terminal: str
    region: int
    exit_point: Optional[np.ndarray] = None

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])


def step_bm(state, dt: float, rng: np.random.Generator) -> np.ndarray:
    """One plain Brownian increment (variance dt per coordinate)."""
    x = np.asarray(state, dtype=float)
    if dt < 0:
        raise ValueError(f"dt must be >= 0, got {dt}")
    return x + rng.normal(scale=np.sqrt(dt), size=x.shape)


def local_dt(dist: np.ndarray, dt: float, dt_min: float, band: float) -> np.ndarray:
    """Quadratic step shrink inside the boundary band, floored at dt_min."""
    frac = np.clip(dist / band, 0.0, 1.0)
    return np.maximum(dt * frac * frac, dt_min)


def _field_at(field, pts: np.ndarray) -> np.ndarray:
    if field is None:
        return np.zeros(len(pts))
    if isinstance(field, ScalarField):
        return field.interp(pts)
    return np.asarray(field(pts), dtype=float)


@dataclass
class PathBatch:
    """Outcome arrays for a batch of independent single-particle paths."""

    terminal: np.ndarray          # object array of terminal labels
    exit_points: np.ndarray       # (n, 2); rows valid where terminal == exited
    end_times: np.ndarray         # lifetime of each path
    weight_integral: np.ndarray   # int of weight field along the path
    payload_integral: np.ndarray  # int of payload * exp(-running weight)

    def exited(self) -> np.ndarray:
        return self.terminal == TERMINAL_EXITED

    def killed(self) -> np.ndarray:
        return self.terminal == TERMINAL_KILLED


def run_path_batch(
    starts: np.ndarray,
    chain: DomainChain,
    region: int,
    dt: float,
    rng: np.random.Generator,
    *,
    drift: Optional[VectorField] = None,
    kill=None,
    weight=None,
    payload=None,
    dt_min: Optional[float] = None,
    band: Optional[float] = None,
    max_steps: int = 10**6,
) -> PathBatch:
    """Advance a batch of independent paths to absorption.

    kill is an actual killing rate (paths end); weight only accumulates
    int weight(x_s) ds; payload accumulates int payload(x_s) exp(-W_s) ds with
    W the running weight integral.  All integrals are left-endpoint sums.
    """
    x = np.array(np.atleast_2d(starts), dtype=float)
    n = len(x)
    shape = chain.region(region)
    if not bool(np.all(shape.contains(x))):
        raise ValueError("all start points must lie inside the region")
    dt_min = dt / 64.0 if dt_min is None else dt_min
    band = 0.1 * chain.scale if band is None else band

    terminal = np.full(n, "", dtype=object)
    exit_points = np.zeros((n, 2))
    end_times = np.zeros(n)
    w_int = np.zeros(n)
    p_int = np.zeros(n)
    alive = np.arange(n)
    t = np.zeros(n)

    for _ in range(max_steps):
        if len(alive) == 0:
            break
        xa = x[alive]
        dist = shape.boundary_distance(xa)
        dtl = local_dt(dist, dt, dt_min, band)
        rate = _field_at(kill, xa)
        with np.errstate(divide="ignore"):
            ev = np.where(rate > 0.0, rng.exponential(size=len(xa)) / np.maximum(rate, 1e-300), np.inf)
        dt_eff = np.minimum(dtl, ev)
        mu = np.zeros_like(xa) if drift is None else drift.interp(xa)
        bad = np.abs(mu).max(axis=1) > DRIFT_CAP
        x_new = xa + mu * dt_eff[:, None] + rng.normal(size=xa.shape) * np.sqrt(dt_eff)[:, None]
        crossed, frac, cpts = shape.segment_exit(xa, x_new)
        adv = np.where(crossed, frac * dt_eff, dt_eff)

        wa = _field_at(weight, xa)
        if payload is not None:
            p_int[alive] += _field_at(payload, xa) * np.exp(-w_int[alive]) * adv
        w_int[alive] += wa * adv
        t[alive] += adv

        died = (~crossed) & (ev <= dtl)
        done = crossed | died | bad
        idx = alive[done]
        terminal[idx[crossed[done]]] = TERMINAL_EXITED
        terminal[alive[died & ~bad]] = TERMINAL_KILLED
        terminal[alive[bad]] = TERMINAL_ABORTED
        exit_points[alive[crossed]] = cpts[crossed]
        end_times[idx] = t[idx]
        x[alive] = np.where(crossed[:, None], cpts, x_new)
        alive = alive[~done]
    if len(alive):
        terminal[alive] = TERMINAL_CAPPED
        end_times[alive] = t[alive]
    return PathBatch(terminal, exit_points, end_times, w_int, p_int)


def _record_single(
    x0,
    chain: DomainChain,
    region: int,
    dt: float,
    rng: np.random.Generator,
    *,
    drift: Optional[VectorField],
    kill,
    dt_min: Optional[float],
    band: Optional[float],
    max_steps: int,
) -> ParticlePath:
    x = np.asarray(x0, dtype=float)
    shape = chain.region(region)
    if not shape.contains(x[None, :])[0]:
        raise ValueError(f"start point {x0} is outside the region")
    dt_min = dt / 64.0 if dt_min is None else dt_min
    band = 0.1 * chain.scale if band is None else band
    times = [0.0]
    pts = [x.copy()]
    t = 0.0
    terminal = TERMINAL_CAPPED
    exit_point = None
    for _ in range(max_steps):
        dist = float(shape.boundary_distance(x[None, :])[0])
        dtl = float(local_dt(np.array([dist]), dt, dt_min, band)[0])
        rate = float(_field_at(kill, x[None, :])[0])
        ev = rng.exponential() / rate if rate > 0.0 else np.inf
        dt_eff = min(dtl, ev)
        mu = np.zeros(2) if drift is None else drift.interp(x[None, :])[0]
        if np.max(np.abs(mu)) > DRIFT_CAP:
            terminal = TERMINAL_ABORTED
            break
        x_new = x + mu * dt_eff + rng.normal(size=2) * np.sqrt(dt_eff)
        crossed, frac, cpt = shape.segment_exit(x[None, :], x_new[None, :])
        if crossed[0]:
            t += float(frac[0]) * dt_eff
            x = cpt[0]
            times.append(t)
            pts.append(x.copy())
            terminal = TERMINAL_EXITED
            exit_point = x.copy()
            break
        t += dt_eff
        x = x_new
        times.append(t)
        pts.append(x.copy())
        if ev <= dtl:
            terminal = TERMINAL_KILLED
            break
    return ParticlePath(
        dt=dt,
        times=np.asarray(times),
        points=np.asarray(pts),
        terminal=terminal,
        region=region,
        exit_point=exit_point,
    )


def simulate_killed(
    x0,
    kill_rate,
    chain: DomainChain,
    region: int,
    dt: float,
    rng: np.random.Generator,
    max_steps: int = 10**6,
    *,
    dt_min: Optional[float] = None,
    band: Optional[float] = None,
) -> ParticlePath:
    """Brownian motion killed at a spatial rate, stopped at the region boundary."""
    return _record_single(
        x0, chain, region, dt, rng,
        drift=None, kill=kill_rate, dt_min=dt_min, band=band, max_steps=max_steps,
    )


def simulate_transform(
    x0,
    base_kill,
    h: ScalarField,
    residual_kill,
    chain: DomainChain,
    region: int,
    dt: float,
    rng: np.random.Generator,
    max_steps: int = 10**6,
    *,
    drift_floor: float = 1e-12,
    dt_min: Optional[float] = None,
    band: Optional[float] = None,
) -> ParticlePath:
    """Pathwise h-transform: drift grad log h plus caller-supplied residual kill.

    base_kill is the kill rate of the underlying generator; it does not enter
    the dynamics (the transform absorbs it) and is accepted to keep call sites
    explicit about which process is being transformed.
    """
    del base_kill
    drift = grad_log(h, floor=drift_floor)
    return _record_single(
        x0, chain, region, dt, rng,
        drift=drift, kill=residual_kill, dt_min=dt_min, band=band, max_steps=max_steps,
    )


def path_integral(path: ParticlePath, field) -> float:
    """Left-endpoint Riemann sum of a field along a recorded path."""
    if len(path.times) < 2:
        return 0.0
    vals = _field_at(field, path.points[:-1])
    return float(np.sum(vals * np.diff(path.times)))


def dump_path_csv(path: ParticlePath, file) -> None:
    """Write a recorded path as t,x,y,event rows for external visualization."""
    with open(file, "w") as fh:
        fh.write("t,x,y,event\n")
        last = len(path.times) - 1
        for i, (t, p) in enumerate(zip(path.times, path.points)):
            event = path.terminal if i == last else ""
            fh.write(f"{float(t)!r},{float(p[0])!r},{float(p[1])!r},{event}\n")
