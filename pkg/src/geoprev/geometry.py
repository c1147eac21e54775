"""Planar geometry primitives: locations, convex regions, quadrature grids.

All coordinates are planar (easting/northing in a shared unit, typically
km). Longitude/latitude inputs must be projected first; see
:func:`project_equirectangular`. Everything here is a pure function of its
inputs; RNG streams are always explicit arguments.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial import ConvexHull as _SciPyHull
from scipy.spatial import QhullError

from .errors import DegenerateGeometry, EmptyGrid

EARTH_RADIUS_KM = 6371.0

# Relative tolerance for boundary membership tests. Points this close to an
# edge (relative to the region diameter) count as inside.
_BOUNDARY_RTOL = 1e-9


class Location(NamedTuple):
    """A planar point: easting ``x`` and northing ``y`` in dataset units."""

    x: float
    y: float


def as_xy(points) -> np.ndarray:
    """Coerce a sequence of Location / pairs / an (n, 2) array to float64 (n, 2)."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 2:
        arr = arr.reshape(1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected (n, 2) coordinates, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("coordinates must be finite")
    return arr


def distance(a, b) -> float:
    """Euclidean distance between two points."""
    ax, ay = a
    bx, by = b
    return float(np.hypot(ax - bx, ay - by))


def pairwise_distances(xy_a: np.ndarray, xy_b: np.ndarray | None = None) -> np.ndarray:
    """Dense Euclidean distance matrix between two point sets."""
    a = as_xy(xy_a)
    b = a if xy_b is None else as_xy(xy_b)
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))


def shoelace_area(xy: np.ndarray) -> float:
    """Signed polygon area (positive for counter-clockwise vertex order)."""
    x = xy[:, 0]
    y = xy[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


@dataclass(frozen=True)
class Region:
    """A convex polygon with counter-clockwise vertices and positive area."""

    vertices: tuple[Location, ...]
    area: float

    def __post_init__(self):
        if len(self.vertices) < 3:
            raise DegenerateGeometry("a region needs at least 3 vertices")
        if self.area <= 0.0:
            raise DegenerateGeometry(f"region area must be positive, got {self.area}")

    @classmethod
    def from_vertices(cls, vertices: Sequence) -> "Region":
        """Build a region from counter-clockwise convex vertices."""
        xy = as_xy(vertices)
        area = shoelace_area(xy)
        if area <= 0.0:
            raise DegenerateGeometry(
                "vertices must be in counter-clockwise order with positive area"
            )
        # convexity: every consecutive edge pair must turn left (or be straight)
        nxt = np.roll(xy, -1, axis=0)
        e = nxt - xy
        cross = e[:, 0] * np.roll(e, -1, axis=0)[:, 1] - e[:, 1] * np.roll(e, -1, axis=0)[:, 0]
        if np.any(cross < -_BOUNDARY_RTOL * np.max(np.abs(cross), initial=1.0)):
            raise DegenerateGeometry("vertices do not form a convex polygon")
        return cls(tuple(Location(float(x), float(y)) for x, y in xy), float(area))

    @property
    def vertex_array(self) -> np.ndarray:
        return as_xy(self.vertices)

    @property
    def diameter(self) -> float:
        """Largest pairwise vertex distance (equals polygon diameter: convex)."""
        return float(np.max(pairwise_distances(self.vertex_array)))

    def bounding_box(self) -> tuple[float, float, float, float]:
        xy = self.vertex_array
        return (
            float(xy[:, 0].min()),
            float(xy[:, 1].min()),
            float(xy[:, 0].max()),
            float(xy[:, 1].max()),
        )

    def contains(self, points) -> np.ndarray:
        """Vectorized membership test; boundary points count as inside."""
        pts = as_xy(points)
        verts = self.vertex_array
        nxt = np.roll(verts, -1, axis=0)
        edge = nxt - verts  # (m, 2)
        rel = pts[:, None, :] - verts[None, :, :]  # (n, m, 2)
        cross = edge[None, :, 0] * rel[:, :, 1] - edge[None, :, 1] * rel[:, :, 0]
        # signed distance from edge = cross / |edge|; inside means all >= -tol
        edge_len = np.hypot(edge[:, 0], edge[:, 1])
        tol = _BOUNDARY_RTOL * self.diameter
        return np.all(cross >= -tol * edge_len[None, :], axis=1)


@dataclass(frozen=True)
class QuadratureGrid:
    """Equal-weight cell-center quadrature points inside a region.

    ``weight`` is the shared per-point weight (the cell area, spacing²);
    ``total_weight`` approximates the parent region's area, with boundary
    cells either fully counted or dropped depending on their center.
    """

    points: np.ndarray  # (k, 2)
    weight: float
    resolution: float

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def total_weight(self) -> float:
        return self.n_points * self.weight

    def coverage_gap(self, region: Region) -> float:
        """Relative mismatch between total weight and the region area."""
        return abs(self.total_weight - region.area) / region.area


def convex_hull(points) -> Region:
    """Minimal convex polygon containing the points, counter-clockwise.

    Raises DegenerateGeometry when fewer than 3 distinct points remain or
    all points are collinear (a quadrature region must have positive area).
    """
    xy = as_xy(points)
    distinct = np.unique(xy, axis=0)
    if distinct.shape[0] < 3:
        raise DegenerateGeometry(
            f"convex hull needs >= 3 distinct points, got {distinct.shape[0]}"
        )
    try:
        hull = _SciPyHull(distinct)
    except QhullError as exc:
        raise DegenerateGeometry(f"degenerate hull input: {exc}") from exc
    verts = distinct[hull.vertices]  # scipy returns CCW order in 2-D
    area = shoelace_area(verts)
    if area <= 0.0:  # pragma: no cover - qhull already rejects collinear input
        raise DegenerateGeometry("hull has zero area (collinear points)")
    return Region(tuple(Location(float(x), float(y)) for x, y in verts), float(area))


def make_grid(region: Region, spacing: float) -> QuadratureGrid:
    """Regular cell-center lattice clipped to the region.

    The lattice is anchored at the bounding-box lower-left corner plus
    spacing/2, and a point carries the full cell weight spacing² iff its
    center lies inside the region (no partial boundary clipping).
    """
    if spacing <= 0.0:
        raise ValueError("spacing must be positive")
    if spacing >= region.diameter:
        raise ValueError(
            f"spacing {spacing} must be smaller than the region diameter "
            f"{region.diameter:.6g}"
        )
    xmin, ymin, xmax, ymax = region.bounding_box()
    xs = np.arange(xmin + spacing / 2.0, xmax, spacing)
    ys = np.arange(ymin + spacing / 2.0, ymax, spacing)
    if xs.size == 0 or ys.size == 0:
        raise EmptyGrid(f"no lattice point at spacing {spacing} fits the region")
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    inside = region.contains(pts)
    if not np.any(inside):
        raise EmptyGrid(f"no lattice point at spacing {spacing} falls inside the region")
    return QuadratureGrid(points=pts[inside], weight=spacing * spacing, resolution=spacing)


def uniform_sample(region: Region, k: int, rng: np.random.Generator) -> np.ndarray:
    """k i.i.d. uniform draws inside the region, by bounding-box rejection.

    Deterministic given the generator state; accepted points keep draw order.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    xmin, ymin, xmax, ymax = region.bounding_box()
    out = np.empty((k, 2), dtype=np.float64)
    filled = 0
    # acceptance rate = area / bbox area; batch to keep the loop short
    batch = max(16, int(1.5 * k * (xmax - xmin) * (ymax - ymin) / region.area))
    while filled < k:
        cand = np.column_stack(
            [
                rng.uniform(xmin, xmax, size=batch),
                rng.uniform(ymin, ymax, size=batch),
            ]
        )
        good = cand[region.contains(cand)]
        take = min(k - filled, good.shape[0])
        out[filled : filled + take] = good[:take]
        filled += take
    return out


def project_equirectangular(
    lon: np.ndarray, lat: np.ndarray, ref_lat: float
) -> np.ndarray:
    """Equirectangular lon/lat (degrees) to planar km about a reference latitude.

    x = R·cos(ref_lat)·lon_rad, y = R·lat_rad. Adequate at district scale;
    ref_lat should be central to the study region.
    """
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    x = EARTH_RADIUS_KM * np.cos(np.deg2rad(ref_lat)) * np.deg2rad(lon)
    y = EARTH_RADIUS_KM * np.deg2rad(lat)
    return np.column_stack([x, y])
