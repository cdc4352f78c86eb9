import numpy as np
import pytest

from sbmexit.backbone import BackboneTree, TreeNode, TreeParams, killing_tree_spec, grow_forest
from sbmexit.immigration import (
    FieldCache,
    ImmigrationError,
    ImmigrationPlan,
    immigration_consistency,
    laplace_semi_analytic,
    pair_laplace_pde,
    realize_Y,
    tagged_laplace_pde,
)
from sbmexit.pde import solve_dirichlet
from sbmexit.subsets import SubsetFamily
from sbmexit.superprocess import CloudParams
from sbmexit import stats


def straight_tree(duration=1.0, steps=200, k=2):
    """Synthetic single-branch tree sitting at the center."""
    times = np.linspace(0.0, duration, steps + 1)
    pts = np.zeros((steps + 1, 2))
    node = TreeNode(id=0, parent=-1, tag=1, birth_time=0.0, times=times,
                    points=pts, terminal="exited", exit_point=pts[-1])
    return BackboneTree(label="killing", k=k, nodes=[node])


def one_fn(pts):
    return np.ones(len(np.atleast_2d(pts)))


@pytest.fixture(scope="module")
def recorded_tree(pair_one, disk_chain, center):
    spec = killing_tree_spec(pair_one)
    rng = stats.rng_stream(20, 0)
    forest = grow_forest(center, spec, disk_chain, 2, 3, rng,
                         TreeParams(dt=5e-4), record=True)
    return forest.trees


def test_zero_phi_gives_value_one(recorded_tree, pair_one, disk_grid):
    g = pair_one.g
    zero = lambda pts: np.zeros(len(np.atleast_2d(pts)))
    # With no test function the shifted solve IS the kill field (nesting),
    # so the exponent vanishes for every tree.
    w_shift = solve_dirichlet(disk_grid, 2, g.values[disk_grid.boundary_nodes(2)])
    for tree in recorded_tree:
        plan = ImmigrationPlan(tree=tree, kill_field=g, k=2, phi=zero)
        assert laplace_semi_analytic(plan, w_shift) == pytest.approx(1.0, abs=1e-9)


def test_phi_monotonicity(recorded_tree, pair_one, disk_grid):
    g = pair_one.g
    cache = FieldCache(disk_grid)
    vals = []
    for c in (0.5, 1.0, 2.0):
        phi = lambda pts, c=c: np.full(len(np.atleast_2d(pts)), c)
        w_shift = cache.solve(2, lambda pts: phi(pts) + g.interp(pts))
        plan = ImmigrationPlan(tree=recorded_tree[0], kill_field=g, k=2, phi=phi)
        vals.append(laplace_semi_analytic(plan, w_shift))
    assert vals[0] >= vals[1] >= vals[2]
    assert all(0.0 <= v <= 1.0 for v in vals)


def test_constant_integrand_closed_form(pair_one, disk_grid):
    # Fake shifted solve equal to kill + c/4 makes the exponent exactly c*T.
    g = pair_one.g
    c, duration = 0.8, 1.3
    tree = straight_tree(duration=duration)
    plan = ImmigrationPlan(tree=tree, kill_field=g, k=2, phi=one_fn)
    w_shift = g.copy_with(g.values + c / 4.0)
    val = laplace_semi_analytic(plan, w_shift)
    assert val == pytest.approx(np.exp(-c * duration), rel=1e-9)


def test_comparison_violation_raises(pair_one, disk_grid):
    g = pair_one.g
    tree = straight_tree()
    plan = ImmigrationPlan(tree=tree, kill_field=g, k=2, phi=one_fn)
    bad = g.copy_with(g.values - 0.1)
    with pytest.raises(ImmigrationError):
        laplace_semi_analytic(plan, bad)


def test_realize_empty_for_huge_kill(disk_chain, disk_grid):
    from sbmexit.pde import ScalarField

    huge = ScalarField.constant(disk_grid, 2e4)
    tree = straight_tree(duration=0.05, steps=20)
    plan = ImmigrationPlan(tree=tree, kill_field=huge, k=2, phi=one_fn)
    rng = stats.rng_stream(21, 0)
    em = realize_Y(plan, 16, rng, disk_chain, CloudParams(n=16, dt=1e-3))
    assert em.total_mass() == 0.0


def test_realize_empty_for_degenerate_tree(pair_one, disk_chain):
    tree = straight_tree(duration=0.0, steps=1)
    tree.nodes[0].times = np.array([0.0])
    tree.nodes[0].points = np.zeros((1, 2))
    plan = ImmigrationPlan(tree=tree, kill_field=pair_one.g, k=2, phi=one_fn)
    rng = stats.rng_stream(21, 1)
    em = realize_Y(plan, 16, rng, disk_chain, CloudParams(n=16, dt=1e-3))
    assert em.total_mass() == 0.0


def test_realization_matches_semi_analytic(recorded_tree, pair_one, disk_chain,
                                           disk_grid):
    g = pair_one.g
    cache = FieldCache(disk_grid)
    w_shift = cache.solve(2, lambda pts: one_fn(pts) + g.interp(pts))
    for i, tree in enumerate(recorded_tree[:2]):
        plan = ImmigrationPlan(tree=tree, kill_field=g, k=2, phi=one_fn)
        out = immigration_consistency(plan, w_shift, 64, 400, 500 + i,
                                      disk_chain, CloudParams(n=64, dt=1e-3))
        assert out["gap_se"] <= 3.0


def test_wrong_kill_field_fails_consistency(pair_one, disk_chain, disk_grid):
    # Negative control: pricing the immigration with the unshifted solve
    # (as if the kill field were absent) must break the self-consistency.
    g = pair_one.g
    tree = straight_tree(duration=1.0)
    plan = ImmigrationPlan(tree=tree, kill_field=g, k=2, phi=one_fn)
    wrong_shift = solve_dirichlet(disk_grid, 2, one_fn)
    wrong = ImmigrationPlan(
        tree=tree,
        kill_field=g.copy_with(np.zeros(disk_grid.n_nodes)),
        k=2,
        phi=one_fn,
    )
    sem_wrong = laplace_semi_analytic(wrong, wrong_shift)
    rng = stats.rng_stream(77, 0)
    from sbmexit.immigration import realize_Y_values

    vals = realize_Y_values(plan, 64, 500, rng, disk_chain, CloudParams(n=64, dt=1e-3))
    emp = np.exp(-vals[np.isfinite(vals)])
    m, se = stats.mean_se(emp)
    assert abs(m - sem_wrong) / se > 3.0


def test_pair_pde_normalization_and_monotonicity(pair_one, disk_grid, center):
    cache = FieldCache(disk_grid)
    zero = lambda pts: np.zeros(len(np.atleast_2d(pts)))
    for k in (1, 2, 3):
        val = pair_laplace_pde(center, zero, k, pair_one, cache)
        assert val == pytest.approx(1.0, abs=1e-8)
    vals = [
        pair_laplace_pde(center, lambda p, c=c: np.full(len(np.atleast_2d(p)), c),
                         2, pair_one, cache)
        for c in (0.5, 1.0, 4.0, 16.0)
    ]
    assert all(0.0 < v <= 1.0 for v in vals)
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    # Large shifts approach a strictly positive limit below one.
    assert vals[-1] < 1.0


def test_tagged_pde_reduces_to_pair_for_one_element(disk_grid, center, pair_one):
    cache = FieldCache(disk_grid)
    ufam = SubsetFamily(1, {1: pair_one.g})
    for c in (0.0, 1.0):
        phi = lambda pts, c=c: np.full(len(np.atleast_2d(pts)), c)
        lhs = tagged_laplace_pde(center, phi, 2, ufam, cache)
        rhs = pair_laplace_pde(center, phi, 2, pair_one, cache)
        assert lhs == pytest.approx(rhs, abs=1e-10)


def test_field_cache_hits(disk_grid, pair_one):
    cache = FieldCache(disk_grid)
    data = lambda pts: np.ones(len(pts))
    a = cache.solve(2, data)
    b = cache.solve(2, data)
    assert a is b
    c = cache.solve(2, lambda pts: 2.0 * np.ones(len(pts)))
    assert c is not a


def test_cross_method_pair_small(pair_one, disk_chain, disk_grid, center):
    from sbmexit.verify import pair_integrand

    cache = FieldCache(disk_grid)
    lhs = pair_laplace_pde(center, one_fn, 2, pair_one, cache)
    spec = killing_tree_spec(pair_one,
                             integrand=pair_integrand(cache, 2, one_fn, pair_one))
    forest = grow_forest(center, spec, disk_chain, 2, 2500,
                         stats.rng_stream(22, 0), TreeParams(dt=2.5e-4))
    m, se = stats.mean_se(forest.laplace_values()[~forest.flagged])
    assert abs(m - lhs) <= 3 * se
