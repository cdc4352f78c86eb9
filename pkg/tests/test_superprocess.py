import numpy as np
import pytest

from sbmexit.pde import ScalarField, solve_blowup, solve_dirichlet
from sbmexit.superprocess import (
    CloudParams,
    PopulationCapError,
    estimate_hitting,
    estimate_w,
    exp_moment_diag,
    run_exit_chain,
    simulate_sbm,
)
from sbmexit import stats


PARAMS = CloudParams(n=64, beta=4.0, dt=1e-3, chunk=500)


def test_single_replica_invariants(disk_chain, center):
    rng = stats.rng_stream(0, 99)
    measures = simulate_sbm(center, 16, disk_chain, None, 1e-3, rng)
    assert [em.k for em in measures] == [1, 2, 3]
    for em in measures:
        assert np.all(em.masses == 1.0 / 16)
        if len(em.points):
            d = disk_chain.boundary_distance(em.points, em.k)
            assert np.max(np.abs(d)) < 1e-10
        assert em.total_mass() >= 0.0


def test_huge_kill_empties_everything(disk_chain, disk_grid, center):
    kill = ScalarField.constant(disk_grid, 5e4)
    total = 0.0
    for i in range(40):
        rng = stats.rng_stream(1, 100 + i)
        measures = simulate_sbm(center, 16, disk_chain, kill, 1e-3, rng)
        total += sum(em.total_mass() for em in measures)
    assert total == 0.0


def test_mass_criticality(disk_chain, center):
    rng = stats.rng_stream(2, 0)
    reps = 3000
    stages, invalid = run_exit_chain(center, reps, disk_chain, PARAMS, rng)
    assert invalid.sum() == 0
    for k in (1, 2, 3):
        st = stages[k]
        tot = np.zeros(reps)
        np.add.at(tot, st.groups, 1.0 / PARAMS.n)
        m, se = stats.mean_se(tot)
        assert abs(m - 1.0) <= 3 * se


def test_first_moment_matches_brownian_exit(disk_chain, center):
    # <X_k, f> in mean equals the plain Brownian exit average of f.
    from sbmexit.diffusion import run_path_batch

    shape = disk_chain.shape
    probe = lambda pts: 1.0 + np.cos(shape.boundary_param(pts))
    rng = stats.rng_stream(3, 0)
    reps = 4000
    stages, _ = run_exit_chain(center, reps, disk_chain, PARAMS, rng, k_max=2)
    st = stages[2]
    acc = np.zeros(reps)
    np.add.at(acc, st.groups, probe(st.points) / PARAMS.n)
    lhs, lhs_se = stats.mean_se(acc)

    batch = run_path_batch(np.repeat(center[None], reps, axis=0), disk_chain,
                           2, 1e-3, stats.rng_stream(3, 1))
    rhs, rhs_se = stats.mean_se(probe(batch.exit_points))
    assert abs(lhs - rhs) <= 3 * np.hypot(lhs_se, rhs_se)


def test_estimate_w_zero_and_monotone(disk_chain, center):
    zero = lambda pts: np.zeros(len(pts))
    est0 = estimate_w(center, zero, 1, 300, 7, disk_chain, PARAMS)
    assert est0.mean == 0.0 and est0.se == 0.0

    psi1 = lambda pts: np.full(len(pts), 0.3)
    psi2 = lambda pts: np.full(len(pts), 0.8)
    e1 = estimate_w(center, psi1, 1, 600, 8, disk_chain, PARAMS)
    e2 = estimate_w(center, psi2, 1, 600, 8, disk_chain, PARAMS)
    # Same seed/stream couples the replicas, so ordering is pathwise.
    assert e1.mean <= e2.mean + 1e-12


def test_anchor_identity_small(disk_chain, g_one, center):
    est = estimate_w(center, g_one, 2, 2500, 123, disk_chain, PARAMS)
    target = g_one.at(0.0, 0.0)
    assert abs(est.mean - target) <= 3 * est.se


def test_resolution_consistency(disk_chain, g_one, center):
    # Estimates at n and 2n agree within combined errors plus an O(1/n) slack.
    e32 = estimate_w(center, g_one, 2, 2000, 9, disk_chain,
                     CloudParams(n=32, beta=4.0, dt=1e-3, chunk=500))
    e64 = estimate_w(center, g_one, 2, 2000, 10, disk_chain, PARAMS)
    gap = abs(e32.mean - e64.mean)
    assert gap <= 3 * np.hypot(e32.se, e64.se) + 1.0 / 32


def test_tower_property_mc(disk_chain, disk_grid, center):
    # Estimating on D_2 directly vs re-rooting the PDE restriction on D_1.
    psi = lambda pts: np.full(len(pts), 1.0)
    direct = estimate_w(center, psi, 2, 3000, 11, disk_chain, PARAMS)
    w2 = solve_dirichlet(disk_grid, 2, 1.0)
    nested = estimate_w(center, w2, 1, 3000, 12, disk_chain, PARAMS)
    assert direct.combined_gap(nested) <= 3.0


def test_estimate_hitting(disk_chain, disk_grid, center):
    assert estimate_hitting(center, [], 100, 13, disk_chain, PARAMS).mean == 0.0
    arcs = [(-np.pi / 4, np.pi / 4)]
    est = estimate_hitting(center, arcs, 2500, 14, disk_chain, PARAMS)
    assert est.mean > 0.0 and np.isfinite(est.mean)
    # Saturated capped solve approximates the hitting exponent.
    g_cap = solve_blowup(disk_grid, arcs, 64.0)
    assert abs(est.mean - g_cap.at(0.0, 0.0)) <= 3 * est.se + 0.05


def test_estimate_hitting_full_boundary(disk_chain, center):
    # At coarse resolution the full-boundary hit frequency stays below one,
    # and its exponent is finite and positive.
    coarse = CloudParams(n=8, beta=4.0, dt=1e-3, chunk=400)
    est = estimate_hitting(center, [(0.0, 2 * np.pi)], 1200, 19, disk_chain, coarse)
    assert 0.0 < est.mean < np.inf


def test_exp_moment_diagnostic(disk_chain, center):
    est0 = exp_moment_diag(center, 0.0, 1, 200, 15, disk_chain, PARAMS)
    assert est0.mean == 0.0
    e_small = exp_moment_diag(center, 0.1, 1, 1500, 16, disk_chain, PARAMS)
    e_big = exp_moment_diag(center, 0.3, 1, 1500, 16, disk_chain, PARAMS)
    assert 0.0 < e_small.mean < e_big.mean
    # Stability across independent runs.
    e_re = exp_moment_diag(center, 0.1, 1, 1500, 17, disk_chain, PARAMS)
    assert e_small.combined_gap(e_re) <= 3.0
    # Far past the guaranteed range the estimate overflows and is flagged.
    diverged = exp_moment_diag(center, 400.0, 1, 300, 17, disk_chain, PARAMS)
    assert diverged.mean == np.inf


def test_population_cap_flags_run(disk_chain, center):
    tiny = CloudParams(n=64, beta=4.0, dt=1e-3, chunk=100, pop_cap=70)
    with pytest.raises(PopulationCapError):
        estimate_w(center, lambda p: np.ones(len(p)), 2, 200, 18, disk_chain, tiny)
