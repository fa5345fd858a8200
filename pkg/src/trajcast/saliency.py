"""Input-gradient visualization of learned features.

For a chosen feature in a chosen layer of the conv stack, the gradient of
that feature with respect to every input pixel shows which parts of the
trajectory image the feature responds to.  Aggregating absolute gradients
by where each pixel sits along the trajectory (first tenth, second tenth,
...) shows which portions of a trip drive the prediction.

Pure given a frozen model: parameter gradient buffers are used as scratch
during the reverse pass and zeroed before returning.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from trajcast.ingest import Trip
from trajcast.model import Network
from trajcast.raster import rasterize_basic, visited_cells

N_DECILES = 10


@dataclass(frozen=True)
class SaliencyMap:
    """Gradient of one feature w.r.t. the input image.

    ``values`` has the input's (channels, rows, cols) shape and carries
    signed gradients; take magnitudes for display.
    """

    layer: int
    channel: int
    row: int
    col: int
    feature_value: float
    values: np.ndarray

    def magnitude(self) -> np.ndarray:
        """Per-pixel absolute influence, summed over input channels."""
        return np.abs(self.values).sum(axis=0)


@dataclass(frozen=True)
class PortionHistogram:
    """Share of absolute input gradient per trajectory-position decile."""

    shares: np.ndarray  # (10,), non-negative, sums to 1
    trips_used: int
    layer: int
    aggregation: str = "per-trip normalized, then averaged"

    def to_dict(self) -> dict:
        return {
            "shares": [float(s) for s in self.shares],
            "trips_used": self.trips_used,
            "layer": self.layer,
            "aggregation": self.aggregation,
        }


def feature_input_gradient(
    network: Network,
    pixels: np.ndarray,
    layer: int,
    selector: tuple[int, int, int] | str = "argmax",
) -> SaliencyMap:
    """Gradient of one conv-stack feature w.r.t. every input pixel.

    ``layer`` is 1-based within the conv stack (1 = first conv output,
    2 = first pool output, ...).  ``selector`` picks the feature: an
    explicit (channel, row, col) triple, or "argmax" for the largest
    activation in that layer's output.
    """
    layers = network.features.layers
    if not 1 <= layer <= len(layers):
        raise ValueError(f"layer must be in [1, {len(layers)}], got {layer}")

    x = pixels
    outputs = []
    for lyr in layers[:layer]:
        x = lyr.forward(x)
        outputs.append(x)
    out = outputs[-1]

    if selector == "argmax":
        c, m, n = np.unravel_index(int(out.argmax()), out.shape)
    else:
        c, m, n = selector
        if not (0 <= c < out.shape[0] and 0 <= m < out.shape[1] and 0 <= n < out.shape[2]):
            raise ValueError(f"selector {selector} outside layer output shape {out.shape}")

    seed = np.zeros_like(out)
    seed[c, m, n] = 1.0
    g = seed
    for lyr in reversed(layers[:layer]):
        g = lyr.backward(g)
    network.zero_grad()  # the reverse pass used parameter grads as scratch

    return SaliencyMap(
        layer=layer,
        channel=int(c),
        row=int(m),
        col=int(n),
        feature_value=float(out[c, m, n]),
        values=g,
    )


def position_decile(index: int, length: int) -> int:
    """1-based decile of a point's position along its trajectory.

    A single-point trajectory sits entirely in decile 1.
    """
    if length < 1 or not 0 <= index < length:
        raise ValueError(f"bad position {index} in trajectory of length {length}")
    if length == 1:
        return 1
    frac = index / (length - 1)
    return min(int(frac * N_DECILES) + 1, N_DECILES)


def portion_statistics(
    network: Network, trips: Sequence[Trip], layer: int | None = None
) -> PortionHistogram:
    """Distribution of input-gradient mass over trajectory-position deciles.

    For each trip, the full trajectory is rasterized onto the model's
    global grid and the largest feature of the chosen layer (default: the
    top of the conv stack) is traced back to input pixels.  Each painted
    pixel's absolute gradient is attributed to the decile of the earliest
    point that painted it; per-trip distributions are normalized before
    averaging.  Trips whose gradient mass is all zero are skipped.
    """
    if not trips:
        raise ValueError("need at least one trip")
    if network.config.variant != "basic":
        raise ValueError("portion statistics need a basic-variant model (global grid)")
    if layer is None:
        layer = len(network.features.layers)

    grid = network.basic_grid
    totals = np.zeros(N_DECILES)
    used = 0
    for trip in trips:
        points = trip.points
        if not points:
            continue
        image = rasterize_basic(points, grid)
        smap = feature_input_gradient(network, image.pixels, layer, "argmax")
        magnitude = np.abs(smap.values[0])
        per_trip = np.zeros(N_DECILES)
        for cell, first_idx in visited_cells(points, grid).items():
            decile = position_decile(first_idx, len(points))
            per_trip[decile - 1] += magnitude[cell.row - 1, cell.col - 1]
        mass = per_trip.sum()
        if mass > 0.0:
            totals += per_trip / mass
            used += 1
    if used == 0:
        raise ValueError("no trip produced any gradient mass")
    return PortionHistogram(shares=totals / used, trips_used=used, layer=layer)
