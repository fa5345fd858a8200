"""Geodesic distance, geographic grids, and cell mapping.

All functions here are pure and operate on plain floats, so they are safe
to call from any number of threads.

Grid geometry uses a local equirectangular projection anchored at the grid
origin: metres east/north of the southwest corner, with longitude scaled by
the cosine of the origin latitude.  Cells are half-open (closed on their
south/west edge), so every in-bounds point maps to exactly one cell and a
point sitting on a shared edge belongs to the cell with the larger index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

EARTH_RADIUS_M = 6_371_000.0

# Porto operating area: (lon_min, lat_min, lon_max, lat_max).
PORTO_BOUNDS = (-8.74, 41.04, -8.50, 41.26)

# Relative snap width for cell-boundary arithmetic.  Projection round-trips
# carry a couple of ulps of noise; snapping keeps the declared edge
# tie-break deterministic.  1e-12 of a 100 m cell is ~0.1 nm.
_EDGE_SNAP = 1e-12


class OutOfRangeError(ValueError):
    """A point falls outside the geographic extent of a grid."""


@dataclass(frozen=True)
class GeoPoint:
    """A longitude/latitude pair in degrees."""

    lon: float
    lat: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lon) and math.isfinite(self.lat)):
            raise ValueError(f"non-finite coordinates ({self.lon}, {self.lat})")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude {self.lon} outside [-180, 180]")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")


@dataclass(frozen=True)
class CellIndex:
    """1-based (row, col) index of a grid cell; row 1 is the southernmost."""

    row: int
    col: int

    def __post_init__(self) -> None:
        if self.row < 1 or self.col < 1:
            raise ValueError(f"cell indices are 1-based, got ({self.row}, {self.col})")


@dataclass(frozen=True)
class Grid:
    """A rectangular window divided into rows x cols cells of fixed metric size.

    ``origin`` is the southwest corner.  Rows count northward, columns
    eastward.
    """

    origin: GeoPoint
    rows: int
    cols: int
    cell_width_m: float
    cell_height_m: float

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid needs at least one cell, got {self.rows}x{self.cols}")
        if not (self.cell_width_m > 0.0 and self.cell_height_m > 0.0):
            raise ValueError("cell dimensions must be positive")

    @property
    def width_m(self) -> float:
        return self.cols * self.cell_width_m

    @property
    def height_m(self) -> float:
        return self.rows * self.cell_height_m

    def contains(self, p: GeoPoint) -> bool:
        try:
            cell_of(p, self)
        except OutOfRangeError:
            return False
        return True


def haversine_m(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in metres on a sphere of ``EARTH_RADIUS_M``.

    Symmetric bit-for-bit: both half-angle differences go through abs(),
    which leaves the even sin^2 terms unchanged.
    """
    phi_a = math.radians(a.lat)
    phi_b = math.radians(b.lat)
    d_phi = abs(math.radians(a.lat - b.lat))
    d_lam = abs(math.radians(a.lon - b.lon))
    h = math.sin(d_phi / 2.0) ** 2 + math.cos(phi_a) * math.cos(phi_b) * math.sin(d_lam / 2.0) ** 2
    # Clamp for roundoff at antipodes; atan2 form is stable near both ends.
    h = min(h, 1.0)
    return 2.0 * EARTH_RADIUS_M * math.atan2(math.sqrt(h), math.sqrt(1.0 - h))


def project_xy(p: GeoPoint, origin: GeoPoint) -> tuple[float, float]:
    """Local equirectangular projection: metres (east, north) of ``origin``."""
    x = math.radians(p.lon - origin.lon) * EARTH_RADIUS_M * math.cos(math.radians(origin.lat))
    y = math.radians(p.lat - origin.lat) * EARTH_RADIUS_M
    return x, y


def unproject_xy(x_m: float, y_m: float, origin: GeoPoint) -> GeoPoint:
    """Inverse of :func:`project_xy`."""
    lat = origin.lat + math.degrees(y_m / EARTH_RADIUS_M)
    lon = origin.lon + math.degrees(
        x_m / (EARTH_RADIUS_M * math.cos(math.radians(origin.lat)))
    )
    return GeoPoint(lon=lon, lat=lat)


def _snap_units(u: float) -> float:
    # Collapse boundary noise of a few ulps so the edge tie-break is stable.
    nearest = round(u)
    if abs(u - nearest) <= _EDGE_SNAP * max(1.0, abs(u)):
        return float(nearest)
    return u


def cell_of(p: GeoPoint, g: Grid) -> CellIndex:
    """Map a point to the unique cell whose extent contains it.

    Cells are closed on the south/west edge; a point exactly on a shared
    edge goes to the higher-index cell.  Raises :class:`OutOfRangeError`
    for points outside the grid.
    """
    x, y = project_xy(p, g.origin)
    u = _snap_units(x / g.cell_width_m)
    v = _snap_units(y / g.cell_height_m)
    if not (0.0 <= u < g.cols and 0.0 <= v < g.rows):
        raise OutOfRangeError(
            f"point ({p.lon}, {p.lat}) outside grid extent "
            f"{g.cols}x{g.rows} cells from ({g.origin.lon}, {g.origin.lat})"
        )
    return CellIndex(row=int(v) + 1, col=int(u) + 1)


def cell_center(g: Grid, c: CellIndex) -> GeoPoint:
    """Geographic center of a cell; inverse-consistent with :func:`cell_of`."""
    if c.row > g.rows or c.col > g.cols:
        raise ValueError(f"cell ({c.row}, {c.col}) outside {g.rows}x{g.cols} grid")
    x = (c.col - 0.5) * g.cell_width_m
    y = (c.row - 0.5) * g.cell_height_m
    return unproject_xy(x, y, g.origin)


def norm(x: float, lo: float, hi: float) -> float:
    """Affine map of [lo, hi] onto [-1, 1]."""
    if not lo < hi:
        raise ValueError(f"degenerate range [{lo}, {hi}]")
    return 2.0 * (x - lo) / (hi - lo) - 1.0


def grid_from_bounds(
    lon_min: float, lat_min: float, lon_max: float, lat_max: float, rows: int, cols: int
) -> Grid:
    """Grid covering a geographic bounding box, divided rows x cols."""
    if not (lon_min < lon_max and lat_min < lat_max):
        raise ValueError("empty bounding box")
    origin = GeoPoint(lon=lon_min, lat=lat_min)
    width, _ = project_xy(GeoPoint(lon=lon_max, lat=lat_min), origin)
    _, height = project_xy(GeoPoint(lon=lon_min, lat=lat_max), origin)
    return Grid(
        origin=origin,
        rows=rows,
        cols=cols,
        cell_width_m=width / cols,
        cell_height_m=height / rows,
    )


def lon_extent(g: Grid) -> tuple[float, float]:
    """Longitude range spanned by the grid (at the origin latitude)."""
    east = unproject_xy(g.width_m, 0.0, g.origin)
    return g.origin.lon, east.lon


def lat_extent(g: Grid) -> tuple[float, float]:
    """Latitude range spanned by the grid."""
    north = unproject_xy(0.0, g.height_m, g.origin)
    return g.origin.lat, north.lat
