"""Planar domains, nested subdomain chains, and exact segment/boundary crossings.

Two shapes are supported, a disk and an axis-aligned rectangle.  Both admit an
exact signed distance to the boundary and an exact first crossing point of a
straight segment, so no bisection or mesh machinery is needed anywhere in the
simulation layer.

A chain is the nested family D_1 < D_2 < ... < D_K < D obtained by shrinking
the ambient domain D by the margin 2^{-k} * scale.  Region selectors used
throughout the package: an integer k in 1..K picks the k-th subdomain, and the
module constant FULL picks the ambient domain itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

# Region selector for the ambient domain D (subdomains are 1..K).
FULL = -1


class GeometryError(ValueError):
    """Degenerate shape or an invalid chain/region request."""


def _as_points(p) -> np.ndarray:
    a = np.asarray(p, dtype=float)
    if a.ndim == 1:
        a = a[None, :]
    if a.shape[-1] != 2:
        raise GeometryError(f"expected planar points, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class Disk:
    cx: float
    cy: float
    radius: float

    def __post_init__(self):
        if not self.radius > 0.0:
            raise GeometryError(f"disk radius must be positive, got {self.radius}")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy])

    def boundary_distance(self, pts) -> np.ndarray:
        """Signed distance to the boundary circle, positive inside."""
        p = _as_points(pts)
        r = np.hypot(p[:, 0] - self.cx, p[:, 1] - self.cy)
        return self.radius - r

    def contains(self, pts) -> np.ndarray:
        return self.boundary_distance(pts) > 0.0

    def inset(self, margin: float) -> "Disk":
        r = self.radius - margin
        if r <= 0.0:
            raise GeometryError(
                f"inset {margin} empties disk of radius {self.radius}"
            )
        return Disk(self.cx, self.cy, r)

    def boundary_param(self, pts) -> np.ndarray:
        """Boundary parameter (angle in [0, 2pi)) of points near the circle."""
        p = _as_points(pts)
        return np.mod(np.arctan2(p[:, 1] - self.cy, p[:, 0] - self.cx), 2.0 * np.pi)

    def boundary_point(self, theta) -> np.ndarray:
        t = np.asarray(theta, dtype=float)
        return np.stack(
            [self.cx + self.radius * np.cos(t), self.cy + self.radius * np.sin(t)],
            axis=-1,
        )

    def project_to_boundary(self, pts) -> np.ndarray:
        p = _as_points(pts)
        d = p - self.center
        n = np.hypot(d[:, 0], d[:, 1])
        n = np.where(n == 0.0, 1.0, n)
        return self.center + d * (self.radius / n)[:, None]

    def segment_exit(self, a, b):
        """First crossing of the segment a->b with the circle.

        Both endpoints arrays of shape (m, 2); a must be inside.  Returns
        (crossed mask, fraction in (0,1], crossing points); fraction/points
        are undefined where not crossed.
        """
        a = _as_points(a)
        b = _as_points(b)
        d = b - a
        rel = a - self.center
        c2 = np.einsum("ij,ij->i", d, d)
        c1 = np.einsum("ij,ij->i", rel, d)
        c0 = np.einsum("ij,ij->i", rel, rel) - self.radius**2
        disc = c1 * c1 - c2 * c0
        safe = np.where(c2 > 0.0, c2, 1.0)
        t = (-c1 + np.sqrt(np.maximum(disc, 0.0))) / safe
        crossed = (c2 > 0.0) & (t <= 1.0)
        pts = self.project_to_boundary(a + t[:, None] * d)
        return crossed, t, pts

    def area_bbox(self):
        return (
            self.cx - self.radius,
            self.cx + self.radius,
            self.cy - self.radius,
            self.cy + self.radius,
        )


@dataclass(frozen=True)
class Rect:
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise GeometryError(f"degenerate rectangle {self}")

    def boundary_distance(self, pts) -> np.ndarray:
        p = _as_points(pts)
        return np.minimum.reduce(
            [
                p[:, 0] - self.xmin,
                self.xmax - p[:, 0],
                p[:, 1] - self.ymin,
                self.ymax - p[:, 1],
            ]
        )

    def contains(self, pts) -> np.ndarray:
        return self.boundary_distance(pts) > 0.0

    def inset(self, margin: float) -> "Rect":
        if 2.0 * margin >= min(self.xmax - self.xmin, self.ymax - self.ymin):
            raise GeometryError(f"inset {margin} empties rectangle {self}")
        return Rect(
            self.xmin + margin, self.xmax - margin, self.ymin + margin, self.ymax - margin
        )

    @property
    def perimeter(self) -> float:
        return 2.0 * ((self.xmax - self.xmin) + (self.ymax - self.ymin))

    def boundary_param(self, pts) -> np.ndarray:
        """Arclength along the boundary, counterclockwise from (xmin, ymin)."""
        p = _as_points(pts)
        w = self.xmax - self.xmin
        h = self.ymax - self.ymin
        dx0 = np.abs(p[:, 0] - self.xmin)
        dx1 = np.abs(p[:, 0] - self.xmax)
        dy0 = np.abs(p[:, 1] - self.ymin)
        dy1 = np.abs(p[:, 1] - self.ymax)
        side = np.argmin(np.stack([dy0, dx1, dy1, dx0]), axis=0)
        s = np.empty(len(p))
        m = side == 0
        s[m] = np.clip(p[m, 0] - self.xmin, 0, w)
        m = side == 1
        s[m] = w + np.clip(p[m, 1] - self.ymin, 0, h)
        m = side == 2
        s[m] = w + h + np.clip(self.xmax - p[m, 0], 0, w)
        m = side == 3
        s[m] = 2 * w + h + np.clip(self.ymax - p[m, 1], 0, h)
        return s

    def segment_exit(self, a, b):
        """First crossing of the segment a->b with the rectangle boundary."""
        a = _as_points(a)
        b = _as_points(b)
        d = b - a
        with np.errstate(divide="ignore", invalid="ignore"):
            tx = np.where(
                d[:, 0] > 0,
                (self.xmax - a[:, 0]) / d[:, 0],
                np.where(d[:, 0] < 0, (self.xmin - a[:, 0]) / d[:, 0], np.inf),
            )
            ty = np.where(
                d[:, 1] > 0,
                (self.ymax - a[:, 1]) / d[:, 1],
                np.where(d[:, 1] < 0, (self.ymin - a[:, 1]) / d[:, 1], np.inf),
            )
        t = np.minimum(tx, ty)
        crossed = t <= 1.0
        pts = a + np.where(np.isfinite(t), t, 0.0)[:, None] * d
        # Snap onto the boundary to kill roundoff.
        pts[:, 0] = np.clip(pts[:, 0], self.xmin, self.xmax)
        pts[:, 1] = np.clip(pts[:, 1], self.ymin, self.ymax)
        hit_x = np.isclose(t, tx) & np.isfinite(tx)
        pts[hit_x, 0] = np.where(d[hit_x, 0] > 0, self.xmax, self.xmin)
        hit_y = np.isclose(t, ty) & np.isfinite(ty)
        pts[hit_y, 1] = np.where(d[hit_y, 1] > 0, self.ymax, self.ymin)
        return crossed, t, pts

    def area_bbox(self):
        return (self.xmin, self.xmax, self.ymin, self.ymax)


Shape = Union[Disk, Rect]


@dataclass(frozen=True)
class DomainChain:
    """Ambient domain D with nested subdomains D_k = {dist to bd(D) > 2^-k * scale}."""

    shape: Shape
    depth: int
    scale: float
    regions: tuple

    def margin(self, k: int) -> float:
        return 2.0 ** (-k) * self.scale

    def region(self, k: int) -> Shape:
        if k == FULL:
            return self.shape
        if not 1 <= k <= self.depth:
            raise GeometryError(f"region index {k} outside 1..{self.depth}")
        return self.regions[k - 1]

    def boundary_distance(self, pts, k: int) -> np.ndarray:
        return self.region(k).boundary_distance(pts)

    def annulus_index(self, pts) -> np.ndarray:
        """Smallest k with the point inside D_k; depth+1 for points outside D_K."""
        p = _as_points(pts)
        out = np.full(len(p), self.depth + 1, dtype=np.int64)
        for k in range(self.depth, 0, -1):
            out[self.regions[k - 1].contains(p)] = k
        return out


def build_chain(shape: Shape, depth: int, scale: float) -> DomainChain:
    """Construct the nested chain, validating that even D_1 is nonempty."""
    if depth < 1:
        raise GeometryError(f"chain depth must be >= 1, got {depth}")
    if not scale > 0.0:
        raise GeometryError(f"chain scale must be positive, got {scale}")
    regions = []
    for k in range(1, depth + 1):
        try:
            regions.append(shape.inset(2.0 ** (-k) * scale))
        except GeometryError as e:
            raise GeometryError(f"subdomain {k} is empty: {e}") from e
    return DomainChain(shape=shape, depth=depth, scale=scale, regions=tuple(regions))


def first_exit(a, b, region: Shape) -> Optional[tuple]:
    """First crossing of one segment with a region boundary, or None.

    The start point must lie strictly inside the region.  Returns
    (fraction along the segment, crossing point).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if not region.contains(a[None, :])[0]:
        raise GeometryError(f"segment start {a} is not inside the region")
    crossed, t, pts = region.segment_exit(a[None, :], b[None, :])
    if not crossed[0]:
        return None
    return float(t[0]), pts[0]
