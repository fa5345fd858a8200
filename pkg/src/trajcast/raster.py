"""Trajectory-to-image conversion.

Two encodings are produced:

* the global image — one channel over a city-wide grid, where visited
  cells read 0.5, the cell holding the trajectory's last point reads 1,
  and everything else reads 0;
* the local-enhancement stack — four channels from two small windows
  centered on the trajectory's start and end points.  Each window yields a
  latitude image and a longitude image whose visited cells carry the
  normalized coordinates of the cell center, mapped into [-1, 1].

Points falling outside a grid are ignored; rasterization never fails on
geometry.  All functions are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from trajcast.geo import (
    CellIndex,
    GeoPoint,
    Grid,
    OutOfRangeError,
    cell_center,
    cell_of,
    lat_extent,
    lon_extent,
    norm,
    unproject_xy,
)


@dataclass(frozen=True)
class TrajectoryImage:
    """A (channels, rows, cols) float64 raster tied to its grid.

    For four-channel local-enhancement stacks, ``grid`` is the end-window
    grid; the first two channels were drawn in the start window's frame.
    """

    grid: Grid
    pixels: np.ndarray

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3:
            raise ValueError(f"pixels must be (channels, rows, cols), got {self.pixels.shape}")
        if self.pixels.shape[1:] != (self.grid.rows, self.grid.cols):
            raise ValueError(
                f"pixel shape {self.pixels.shape[1:]} does not match "
                f"grid {self.grid.rows}x{self.grid.cols}"
            )

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class LocalWindow:
    """A small square grid centered on one trajectory anchor point."""

    anchor: GeoPoint
    grid: Grid


def visited_cells(prefix: Sequence[GeoPoint], grid: Grid) -> dict[CellIndex, int]:
    """Cells touched by the prefix, each mapped to the index of the first
    point that painted it.  Out-of-grid points are skipped."""
    first_painter: dict[CellIndex, int] = {}
    for i, p in enumerate(prefix):
        try:
            cell = cell_of(p, grid)
        except OutOfRangeError:
            continue
        first_painter.setdefault(cell, i)
    return first_painter


def rasterize_basic(prefix: Sequence[GeoPoint], grid: Grid) -> TrajectoryImage:
    """Global encoding: visited cells 0.5, last point's cell 1, else 0."""
    if not prefix:
        raise ValueError("cannot rasterize an empty trajectory")
    pixels = np.zeros((1, grid.rows, grid.cols))
    for cell in visited_cells(prefix, grid):
        pixels[0, cell.row - 1, cell.col - 1] = 0.5
    try:
        last = cell_of(prefix[-1], grid)
        pixels[0, last.row - 1, last.col - 1] = 1.0
    except OutOfRangeError:
        pass
    return TrajectoryImage(grid=grid, pixels=pixels)


def make_local_window(anchor: GeoPoint, m: int, cell_m: float) -> LocalWindow:
    """Square m x m window of ``cell_m``-metre cells with the anchor in the
    central cell (row ceil(m/2), col ceil(m/2))."""
    if m < 1:
        raise ValueError(f"window needs at least one cell, got {m}")
    if cell_m <= 0.0:
        raise ValueError(f"cell size must be positive, got {cell_m}")
    central = math.ceil(m / 2)
    offset = (central - 0.5) * cell_m
    origin = unproject_xy(-offset, -offset, anchor)
    grid = Grid(origin=origin, rows=m, cols=m, cell_width_m=cell_m, cell_height_m=cell_m)
    return LocalWindow(anchor=anchor, grid=grid)


def rasterize_local(
    prefix: Sequence[GeoPoint],
    window: LocalWindow,
    norm_bounds: tuple[float, float, float, float] | None = None,
) -> tuple[TrajectoryImage, TrajectoryImage]:
    """Latitude and longitude images for the part of the prefix inside the
    window.

    Visited cells carry norm(cell-center latitude) and norm(cell-center
    longitude); untouched cells are 0.  Normalization bounds default to the
    window's own lat/lon extent; pass ``norm_bounds`` as (lon_lo, lat_lo,
    lon_hi, lat_hi) to normalize against a fixed frame instead (which makes
    pixel values encode absolute position).  A window containing no
    trajectory points yields all-zero images.
    """
    if not prefix:
        raise ValueError("cannot rasterize an empty trajectory")
    grid = window.grid
    if norm_bounds is None:
        lon_lo, lon_hi = lon_extent(grid)
        lat_lo, lat_hi = lat_extent(grid)
    else:
        lon_lo, lat_lo, lon_hi, lat_hi = norm_bounds
    lat_img = np.zeros((1, grid.rows, grid.cols))
    lon_img = np.zeros((1, grid.rows, grid.cols))
    for cell in visited_cells(prefix, grid):
        center = cell_center(grid, cell)
        lat_img[0, cell.row - 1, cell.col - 1] = norm(center.lat, lat_lo, lat_hi)
        lon_img[0, cell.row - 1, cell.col - 1] = norm(center.lon, lon_lo, lon_hi)
    return (
        TrajectoryImage(grid=grid, pixels=lat_img),
        TrajectoryImage(grid=grid, pixels=lon_img),
    )


def stack_le(
    prefix: Sequence[GeoPoint],
    m: int,
    cell_m: float,
    norm_bounds: tuple[float, float, float, float] | None = None,
) -> TrajectoryImage:
    """Four-channel local-enhancement stack.

    Channels, in order: start-window latitude, start-window longitude,
    end-window latitude, end-window longitude.  The start window anchors on
    the first prefix point, the end window on the last.
    """
    if not prefix:
        raise ValueError("cannot rasterize an empty trajectory")
    start = make_local_window(prefix[0], m, cell_m)
    end = make_local_window(prefix[-1], m, cell_m)
    s_lat, s_lon = rasterize_local(prefix, start, norm_bounds)
    e_lat, e_lon = rasterize_local(prefix, end, norm_bounds)
    pixels = np.concatenate(
        [s_lat.pixels, s_lon.pixels, e_lat.pixels, e_lon.pixels], axis=0
    )
    return TrajectoryImage(grid=end.grid, pixels=pixels)


# --- inspection output ----------------------------------------------------


def image_to_text(image: TrajectoryImage, channel: int = 0) -> str:
    """Plain-text grid dump, north row first."""
    rows = []
    for r in range(image.grid.rows - 1, -1, -1):
        rows.append(" ".join(f"{v:g}" for v in image.pixels[channel, r]))
    return "\n".join(rows) + "\n"


def write_pgm(path: str, image: TrajectoryImage, channel: int = 0) -> None:
    """ASCII PGM dump of one channel, linearly scaled to 0..255."""
    plane = image.pixels[channel]
    lo, hi = float(plane.min()), float(plane.max())
    if hi > lo:
        scaled = np.rint((plane - lo) / (hi - lo) * 255.0).astype(np.int64)
    else:
        scaled = np.zeros(plane.shape, dtype=np.int64)
    with open(path, "w") as fh:
        fh.write(f"P2\n{image.grid.cols} {image.grid.rows}\n255\n")
        for r in range(image.grid.rows - 1, -1, -1):
            fh.write(" ".join(str(v) for v in scaled[r]) + "\n")
