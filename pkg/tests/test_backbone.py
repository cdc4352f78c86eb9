import numpy as np
import pytest

from sbmexit.backbone import (
    FieldConsistencyError,
    PairFields,
    TreeParams,
    branch_stats,
    clock_tree_spec,
    grow_forest,
    grow_tree_killing,
    grow_tree_tagged,
    killing_tree_spec,
    prune_tree,
    tagged_tree_spec,
)
from sbmexit.subsets import SubsetFamily
from sbmexit import stats


def test_residual_rate_equals_twice_gap(pair_one, disk_grid):
    spec = killing_tree_spec(pair_one)
    v = pair_one.v_field()
    inner = disk_grid.nodes_in_region(2)
    diff = np.abs(spec.tags[1].rate.values[inner] - 2.0 * v.values[inner])
    assert np.max(diff) < 1e-6


def test_zero_rate_gives_single_lines(pair_one, disk_chain, center):
    spec = clock_tree_spec(pair_one, rate_factor=0.0)
    rng = stats.rng_stream(0, 0)
    forest = grow_forest(center, spec, disk_chain, 2, 200, rng, TreeParams(dt=5e-4))
    assert np.all(forest.gamma == 1)
    assert np.all(~np.isfinite(forest.first_branch))
    assert forest.flagged.sum() == 0


def test_recorded_tree_structure(pair_one, disk_chain, center):
    rng = stats.rng_stream(1, 0)
    found_branch = False
    for i in range(30):
        tree = grow_tree_killing(center, pair_one, disk_chain, 2, 5e-4,
                                 stats.rng_stream(1, i))
        assert tree.nodes[0].parent == -1
        for nd in tree.nodes:
            if nd.terminal == "branched":
                found_branch = True
                assert len(nd.children) == 2
                for cid in nd.children:
                    child = tree.nodes[cid]
                    assert child.parent == nd.id
                    assert child.birth_time == pytest.approx(nd.times[-1])
                    assert child.points[0] == pytest.approx(nd.points[-1])
            elif nd.terminal == "exited":
                d = disk_chain.boundary_distance(nd.points[-1][None], 2)[0]
                assert abs(d) < 1e-10
        assert tree.exit_count() >= 1
        if found_branch and i > 5:
            break
    assert found_branch


def test_gamma_monotone_in_level(pair_one, disk_chain, center):
    rng = stats.rng_stream(2, 0)
    forest = grow_forest(center, killing_tree_spec(pair_one), disk_chain, 3,
                         400, rng, TreeParams(dt=5e-4))
    diffs = np.diff(forest.gammas[:, 1:], axis=1)
    assert np.all(diffs >= 0)


def test_prune_consistency(pair_one, disk_chain, center):
    for i in range(12):
        tree = grow_tree_killing(center, pair_one, disk_chain, 3, 5e-4,
                                 stats.rng_stream(3, i))
        p21 = prune_tree(prune_tree(tree, 2, disk_chain), 1, disk_chain)
        p1 = prune_tree(tree, 1, disk_chain)
        assert len(p21.nodes) == len(p1.nodes)
        assert p21.exit_count() == p1.exit_count()
        for a, b in zip(p21.nodes, p1.nodes):
            assert a.terminal == b.terminal
            if a.terminal == "exited":
                assert a.exit_point == pytest.approx(b.exit_point, abs=1e-9)
        # Pruned exit counts match the forest's per-level counters in law:
        # each level's count dominates the previous one.
        assert p1.exit_count() <= prune_tree(tree, 2, disk_chain).exit_count()


def test_law_equality_and_negative_control(pair_one, disk_chain, center):
    params = TreeParams(dt=5e-4)
    n = 2500
    f_kill = grow_forest(center, killing_tree_spec(pair_one), disk_chain, 2,
                         n, stats.rng_stream(4, 0), params)
    f_clock = grow_forest(center, clock_tree_spec(pair_one), disk_chain, 2,
                          n, stats.rng_stream(4, 1), params)
    bins = np.append(np.arange(0.5, 11.5), np.inf)
    p = stats.histogram_pvalue(f_kill.gamma, f_clock.gamma, bins)
    assert p > 0.01
    t1 = f_kill.first_branch[np.isfinite(f_kill.first_branch)]
    t2 = f_clock.first_branch[np.isfinite(f_clock.first_branch)]
    assert stats.ks_pvalue(t1, t2) > 0.01

    f_bad = grow_forest(center, clock_tree_spec(pair_one, rate_factor=4.0),
                        disk_chain, 2, n, stats.rng_stream(4, 2), params)
    assert stats.histogram_pvalue(f_kill.gamma, f_bad.gamma, bins) < 0.01


def test_self_law_identical_seed(pair_one, disk_chain, center):
    params = TreeParams(dt=5e-4)
    a = grow_forest(center, killing_tree_spec(pair_one), disk_chain, 2, 500,
                    stats.rng_stream(5, 0), params)
    b = grow_forest(center, killing_tree_spec(pair_one), disk_chain, 2, 500,
                    stats.rng_stream(5, 0), params)
    assert np.array_equal(a.gamma, b.gamma)
    assert np.array_equal(a.laplace_exponent, b.laplace_exponent)


def make_family(disk_grid):
    from sbmexit.pde import solve_blowup
    from sbmexit.subsets import v_from_u

    arcs = [(-np.pi / 8, np.pi / 8 + np.pi / 4),
            (np.pi - np.pi / 8, np.pi + 3 * np.pi / 8)]
    u1 = solve_blowup(disk_grid, [arcs[0]], 8.0, name="u1")
    u2 = solve_blowup(disk_grid, [arcs[1]], 8.0, name="u2")
    u12 = solve_blowup(disk_grid, arcs, 8.0, name="u12")
    ufam = SubsetFamily(2, {1: u1, 2: u2, 3: u12})
    raw = v_from_u(SubsetFamily(2, {m: ufam[m].values for m in ufam.masks()}),
                   check=True, tol=-1e-9)
    vfam = SubsetFamily(2, {m: ufam[m].copy_with(np.maximum(raw[m], 0.0))
                            for m in ufam.masks()})
    return ufam, vfam


@pytest.fixture(scope="module")
def family(disk_grid):
    return make_family(disk_grid)


def test_tagged_singleton_reduces_to_pair(disk_grid, disk_chain, center, family):
    # A one-element family built from a single union field has joint field
    # equal to that union field, so the tagged construction must match the
    # pair construction with the same guide.
    ufam, _ = family
    u1 = ufam[1]
    single_v = SubsetFamily(1, {1: u1})
    spec1 = tagged_tree_spec(single_v)
    inner = disk_grid.nodes_in_region(2)
    got = spec1.tags[1].rate.values[inner]
    want = 2.0 * u1.values[inner]
    assert np.max(np.abs(got - want)) < 1e-9
    f_tag = grow_forest(center, spec1, disk_chain, 2, 1500,
                        stats.rng_stream(6, 0), TreeParams(dt=5e-4))
    f_pair = grow_forest(center, clock_tree_spec(PairFields(g=u1, u=None)),
                         disk_chain, 2, 1500, stats.rng_stream(6, 1),
                         TreeParams(dt=5e-4))
    bins = np.append(np.arange(0.5, 11.5), np.inf)
    assert stats.histogram_pvalue(f_tag.gamma, f_pair.gamma, bins) > 0.01


def test_tagged_cover_invariant(disk_chain, center, family):
    ufam, vfam = family
    spec = tagged_tree_spec(vfam)
    full = vfam.full_mask
    for i in range(15):
        tree = grow_tree_tagged(center, vfam, ufam[3], disk_chain, 2, 5e-4,
                                stats.rng_stream(7, i))
        assert tree.nodes[0].tag == full
        union = 0
        for nd in tree.nodes:
            if nd.terminal == "branched":
                a, b = (tree.nodes[c].tag for c in nd.children)
                assert (a | b) == nd.tag
                assert a != 0 and b != 0
            elif nd.terminal == "exited":
                union |= nd.tag
        assert union == full


def test_node_budget_flags_trees(pair_one, disk_chain, center):
    params = TreeParams(dt=5e-4, node_budget=2)
    forest = grow_forest(center, killing_tree_spec(pair_one), disk_chain, 2,
                         300, stats.rng_stream(8, 0), params)
    # Trees that tried to branch hit the two-node budget and get flagged.
    assert forest.flagged.sum() > 0
    assert np.all(forest.gamma[~forest.flagged] == 1)


def test_branch_stats_shapes(pair_one, disk_chain, center):
    forest = grow_forest(center, killing_tree_spec(pair_one), disk_chain, 3,
                         400, stats.rng_stream(9, 0), TreeParams(dt=5e-4))
    out = branch_stats(forest)
    assert out["n_trees"] == 400
    assert len(out["annulus_means"]) == 3
    assert len(out["cumulative_means"]) == 3
    assert np.all(np.diff(out["cumulative_means"]) >= -1e-12)


def test_field_validation_rejects_disordered_pair(g_one):
    bad = PairFields(g=g_one, u=g_one.copy_with(g_one.values * 2.0))
    with pytest.raises(FieldConsistencyError):
        bad.validate()
