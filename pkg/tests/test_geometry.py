import numpy as np
import pytest

from sbmexit.geometry import (
    Disk,
    GeometryError,
    Rect,
    build_chain,
    first_exit,
)


def test_disk_chain_radii():
    chain = build_chain(Disk(0.0, 0.0, 1.0), 3, 1.0)
    assert [chain.region(k).radius for k in (1, 2, 3)] == [0.5, 0.75, 0.875]


def test_unit_disk_scale_two_is_empty():
    with pytest.raises(GeometryError):
        build_chain(Disk(0.0, 0.0, 1.0), 1, 2.0)


def test_rect_inset_quarter():
    r = Rect(0.0, 1.0, 0.0, 1.0).inset(0.25)
    assert (r.xmin, r.xmax, r.ymin, r.ymax) == (0.25, 0.75, 0.25, 0.75)


def test_unit_square_chain_depth2_has_empty_first_region():
    # The half-unit inset of the unit square is empty, so the chain builder
    # must refuse it even though the quarter inset would be fine.
    with pytest.raises(GeometryError):
        build_chain(Rect(0.0, 1.0, 0.0, 1.0), 2, 1.0)
    chain = build_chain(Rect(-1.0, 1.0, -1.0, 1.0), 2, 1.0)
    r2 = chain.region(2)
    assert (r2.xmin, r2.xmax) == (-0.75, 0.75)


def test_first_exit_disk_examples():
    disk = Disk(0.0, 0.0, 1.0)
    frac, pt = first_exit([0.0, 0.0], [2.0, 0.0], disk)
    assert frac == pytest.approx(0.5, abs=1e-14)
    assert pt == pytest.approx([1.0, 0.0], abs=1e-12)
    assert first_exit([0.0, 0.0], [0.1, 0.1], disk) is None


def test_first_exit_rect_corner():
    rect = Rect(-1.0, 1.0, -1.0, 1.0)
    frac, pt = first_exit([0.0, 0.0], [1.0, 1.0], rect)
    assert frac == pytest.approx(1.0, abs=1e-14)
    assert pt == pytest.approx([1.0, 1.0], abs=1e-14)


def test_first_exit_requires_interior_start():
    with pytest.raises(GeometryError):
        first_exit([2.0, 0.0], [3.0, 0.0], Disk(0.0, 0.0, 1.0))


@pytest.mark.parametrize("shape", [Disk(0.2, -0.1, 0.9), Rect(-1.0, 1.2, -0.8, 1.0)])
def test_first_exit_consistent_under_subdivision(shape):
    rng = np.random.default_rng(5)
    for _ in range(200):
        a = rng.uniform(-0.3, 0.3, size=2)
        if not shape.contains(a[None])[0]:
            continue
        b = a + rng.uniform(-4.0, 4.0, size=2)
        hit = first_exit(a, b, shape)
        if hit is None:
            continue
        frac, pt = hit
        s = rng.uniform(0.05, 0.95)
        mid = a + s * (b - a)
        if s < frac:
            sub = first_exit(mid, b, shape)
            assert sub is not None
            assert sub[1] == pytest.approx(pt, abs=1e-9)
        else:
            sub = first_exit(a, mid, shape)
            assert sub is not None
            assert sub[1] == pytest.approx(pt, abs=1e-9)


def test_monotone_nesting(disk_chain):
    rng = np.random.default_rng(6)
    pts = rng.uniform(-1.0, 1.0, size=(500, 2))
    for j in range(1, disk_chain.depth):
        inside_j = disk_chain.region(j).contains(pts)
        inside_k = disk_chain.region(j + 1).contains(pts)
        assert np.all(~inside_j | inside_k)


def test_annulus_index(disk_chain):
    pts = np.array([[0.0, 0.0], [0.6, 0.0], [0.8, 0.0], [0.9, 0.0]])
    assert disk_chain.annulus_index(pts).tolist() == [1, 2, 3, 4]


def test_boundary_param_roundtrip():
    disk = Disk(0.5, -0.5, 2.0)
    thetas = np.linspace(0.0, 2.0 * np.pi, 17, endpoint=False)
    pts = disk.boundary_point(thetas)
    assert disk.boundary_param(pts) == pytest.approx(thetas, abs=1e-12)
    rect = Rect(0.0, 2.0, 0.0, 1.0)
    probes = np.array([[1.0, 0.0], [2.0, 0.5], [1.0, 1.0], [0.0, 0.5]])
    assert rect.boundary_param(probes) == pytest.approx([1.0, 2.5, 4.0, 5.5])


def test_segment_exit_batch_on_boundary_tolerance():
    disk = Disk(0.0, 0.0, 1.0)
    rng = np.random.default_rng(7)
    a = rng.uniform(-0.5, 0.5, size=(300, 2))
    b = a + rng.normal(scale=2.0, size=(300, 2))
    crossed, _, pts = disk.segment_exit(a, b)
    dists = disk.boundary_distance(pts[crossed])
    assert np.max(np.abs(dists)) < 1e-10
