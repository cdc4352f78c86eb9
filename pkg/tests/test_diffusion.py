import numpy as np
import pytest

from sbmexit.geometry import FULL, Disk, build_chain
from sbmexit.pde import ScalarField, grad_log, solve_linear
from sbmexit.diffusion import (
    ParticlePath,
    path_integral,
    run_path_batch,
    simulate_killed,
    simulate_transform,
    step_bm,
)
from sbmexit.stats import ks_pvalue, mean_se


def test_step_bm_moments():
    rng = np.random.default_rng(0)
    x = np.array([1.0, -2.0])
    assert np.array_equal(step_bm(x, 0.0, rng), x)
    dt = 0.3
    steps = np.array([step_bm(np.zeros(2), dt, rng) for _ in range(20000)])
    se = np.sqrt(dt / len(steps))
    assert np.all(np.abs(steps.mean(axis=0)) < 4 * se)
    assert np.var(steps[:, 0]) == pytest.approx(dt, rel=0.05)
    assert np.var(steps[:, 1]) == pytest.approx(dt, rel=0.05)


def test_simulate_killed_no_rate_always_exits(disk_chain):
    rng = np.random.default_rng(1)
    for _ in range(10):
        path = simulate_killed([0.0, 0.0], None, disk_chain, 1, 1e-3, rng)
        assert path.terminal == "exited"
        assert abs(np.hypot(*path.exit_point) - 0.5) < 1e-10
        # All interior vertices stay inside the region.
        assert np.all(np.hypot(path.points[:-1, 0], path.points[:-1, 1]) < 0.5)


def test_killed_survival_matches_exponential_clock():
    # Huge domain: the boundary is unreachable on the tested horizon, so the
    # lifetime is a pure exponential clock.  A small single-path sample checks
    # the recorded-path op; the batch engine provides the statistical power.
    chain = build_chain(Disk(0.0, 0.0, 60.0), 1, 1.0)
    c = 3.0
    t_star = 0.4
    dt = 5e-3
    p_true = np.exp(-c * t_star)

    rng = np.random.default_rng(2)
    kill = lambda pts: np.full(len(pts), c)
    single = [
        simulate_killed([0.0, 0.0], kill, chain, 1, dt, rng,
                        max_steps=int(t_star / dt))
        for _ in range(300)
    ]
    p_single = np.mean([p.terminal != "killed" for p in single])

    batch = run_path_batch(np.zeros((6000, 2)), chain, 1, dt, rng, kill=kill,
                           max_steps=int(t_star / dt))
    p_batch = float(np.mean(batch.terminal != "killed"))
    for p_hat, reps in ((p_single, 300), (p_batch, 6000)):
        se = np.sqrt(p_true * (1 - p_true) / reps)
        assert abs(p_hat - p_true) <= 3 * se


def test_killed_exit_probability_matches_pde(disk_chain, disk_grid):
    # P(exit D_1 before killing at rate c) solves the killed harmonic problem.
    c = 2.0
    cfield = ScalarField.constant(disk_grid, c)
    p = solve_linear(disk_grid, 1, cfield, None, 1.0)
    target = p.at(0.0, 0.0)
    rng = np.random.default_rng(3)
    starts = np.zeros((4000, 2))
    batch = run_path_batch(starts, disk_chain, 1, 1e-3, rng,
                           kill=lambda pts: np.full(len(pts), c))
    freq = float(np.mean(batch.exited()))
    se = np.sqrt(freq * (1 - freq) / len(starts))
    assert abs(freq - target) <= 3 * se


def test_transform_identity_is_plain_bm(disk_chain, disk_grid):
    # Unit guide field: the exit distribution from the center is uniform.
    one = ScalarField.constant(disk_grid, 1.0)
    rng = np.random.default_rng(4)
    starts = np.zeros((10000, 2))
    batch = run_path_batch(starts, disk_chain, FULL, 1e-3, rng,
                           drift=grad_log(one))
    ang = disk_chain.shape.boundary_param(batch.exit_points[batch.exited()])
    uniform = np.random.default_rng(5).uniform(0.0, 2 * np.pi, size=len(ang))
    assert ks_pvalue(ang, uniform) > 0.01


def test_transform_harmonic_exit_law(disk_chain, disk_grid):
    from scipy import stats as sps

    shape = disk_chain.shape
    f = lambda pts: 1.0 + 0.5 * np.cos(shape.boundary_param(pts))
    h = solve_linear(disk_grid, FULL, None, None, f)
    rng = np.random.default_rng(6)
    starts = np.zeros((10000, 2))
    batch = run_path_batch(starts, disk_chain, FULL, 1e-3, rng,
                           drift=grad_log(h))
    ang = shape.boundary_param(batch.exit_points[batch.exited()])
    bins = np.linspace(0.0, 2 * np.pi, 25)
    obs, _ = np.histogram(ang, bins=bins)
    centers = 0.5 * (bins[1:] + bins[:-1])
    weights = 1.0 + 0.5 * np.cos(centers)
    assert sps.chisquare(obs, weights / weights.sum() * obs.sum()).pvalue > 0.01


def test_transform_girsanov_weights(disk_chain, disk_grid):
    # Transform expectation of a boundary functional equals the h-weighted
    # plain-Brownian expectation.
    shape = disk_chain.shape
    f = lambda pts: 1.0 + 0.5 * np.cos(shape.boundary_param(pts))
    h = solve_linear(disk_grid, FULL, None, None, f)
    probe = lambda pts: np.cos(2.0 * shape.boundary_param(pts)) + 1.5

    rng = np.random.default_rng(7)
    starts = np.zeros((6000, 2))
    tr = run_path_batch(starts, disk_chain, FULL, 1e-3, rng, drift=grad_log(h))
    lhs, lhs_se = mean_se(probe(tr.exit_points[tr.exited()]))

    bm = run_path_batch(starts, disk_chain, FULL, 1e-3, rng)
    w = f(bm.exit_points) / h.at(0.0, 0.0)
    rhs, rhs_se = mean_se(probe(bm.exit_points) * w)
    assert abs(lhs - rhs) <= 3 * np.hypot(lhs_se, rhs_se)


def _mixture_fields(disk_grid):
    # Guide u = h + potential for the unit-rate killed motion; the residual
    # kill of the u-transform is source/u.
    c = 1.0
    cf = ScalarField.constant(disk_grid, c)
    h = solve_linear(disk_grid, FULL, cf, None, 1.0, name="harmonic-part")
    one = ScalarField.constant(disk_grid, 1.0)
    pot = solve_linear(disk_grid, FULL, cf, one, 0.0, name="potential-part")
    u = h.copy_with(h.values + pot.values, name="guide")
    return cf, h, pot, u


def test_transform_mixture_decomposition(disk_chain, disk_grid):
    # Exit frequency equals the harmonic share of the guide, interior death
    # the potential share; checked with the batch engine and cross-checked
    # against a small recorded-path sample.
    cf, h, pot, u = _mixture_fields(disk_grid)
    resid = u.copy_with(np.ones(disk_grid.n_nodes) / np.maximum(u.values, 1e-12))
    share = h.at(0.0, 0.0) / u.at(0.0, 0.0)

    rng = np.random.default_rng(8)
    reps = 8000
    batch = run_path_batch(np.zeros((reps, 2)), disk_chain, FULL, 1e-3, rng,
                           drift=grad_log(u), kill=resid)
    freq = float(np.mean(batch.exited()))
    se = np.sqrt(share * (1 - share) / reps)
    assert abs(freq - share) <= 3 * se

    small = [
        simulate_transform([0.0, 0.0], cf, u, resid, disk_chain, FULL, 1e-3, rng)
        for _ in range(250)
    ]
    freq_small = np.mean([p.terminal == "exited" for p in small])
    assert abs(freq_small - share) <= 3 * np.sqrt(share * (1 - share) / len(small))


def test_transform_interior_functional_rescaling(disk_chain, disk_grid):
    # For functionals of interior-death paths, the full-guide and
    # potential-guide simulations agree after the share rescaling.
    cf, h, pot, u = _mixture_fields(disk_grid)
    resid_u = u.copy_with(np.ones(disk_grid.n_nodes) / np.maximum(u.values, 1e-12))
    resid_v = pot.copy_with(np.ones(disk_grid.n_nodes) / np.maximum(pot.values, 1e-12))
    rng = np.random.default_rng(9)
    reps = 8000

    def run(guide, resid):
        batch = run_path_batch(np.zeros((reps, 2)), disk_chain, FULL, 2e-3,
                               rng, drift=grad_log(guide), kill=resid)
        vals = np.where(batch.killed(), np.exp(-batch.end_times), 0.0)
        return mean_se(vals)

    lhs, lhs_se = run(u, resid_u)
    rhs_raw, rhs_se = run(pot, resid_v)
    share = pot.at(0.0, 0.0) / u.at(0.0, 0.0)
    rhs = share * rhs_raw
    assert abs(lhs - rhs) <= 3 * np.hypot(lhs_se, share * rhs_se)


def test_path_integral_examples():
    pts = np.stack([np.linspace(0.0, 1.0, 101), np.zeros(101)], axis=1)
    times = np.linspace(0.0, 2.0, 101)
    path = ParticlePath(dt=0.02, times=times, points=pts, terminal="exited",
                        region=FULL)
    assert path_integral(path, lambda p: np.zeros(len(p))) == 0.0
    assert path_integral(path, lambda p: np.full(len(p), 3.0)) == pytest.approx(6.0)
    # |x|^2 along the segment x(t) = t/2: integral of t^2/4 over [0, 2].
    val = path_integral(path, lambda p: p[:, 0] ** 2 + p[:, 1] ** 2)
    assert val == pytest.approx(2.0 / 3.0, abs=0.02)


def test_path_vertices_spacing(disk_chain):
    rng = np.random.default_rng(10)
    path = simulate_killed([0.0, 0.0], None, disk_chain, 1, 1e-3, rng)
    gaps = np.diff(path.times)
    assert np.all(gaps > 0)
    assert np.all(gaps <= 1e-3 + 1e-15)


def test_dump_path_csv(tmp_path, disk_chain):
    from sbmexit.diffusion import dump_path_csv

    rng = np.random.default_rng(11)
    path = simulate_killed([0.0, 0.0], None, disk_chain, 1, 1e-3, rng)
    file = tmp_path / "path.csv"
    dump_path_csv(path, file)
    lines = file.read_text().splitlines()
    assert lines[0] == "t,x,y,event"
    assert len(lines) == len(path.times) + 1
    assert lines[-1].endswith("exited")
