"""Synthetic Porto-like trip generation.

Produces trips in the competition CSV schema with learnable structure:
destinations cluster around a fixed set of hotspots, taxi stands prefer
particular hotspots, and dispatch time slots bias hotspot choice for
street/central pickups.  Routes are gently curved start-to-destination
paths sampled at roughly 15-second spacing with GPS jitter, so consecutive
fixes never jump implausibly far.

Deterministic for a given seed.  Run as a module to write a CSV:

    python -m trajcast.synth --out trips.csv --trips 10000 --seed 7
"""

from __future__ import annotations

import argparse
import math
from dataclasses import dataclass

import numpy as np

from trajcast.geo import GeoPoint, PORTO_BOUNDS, project_xy, unproject_xy
from trajcast.ingest import CallType, DayType, Trip, write_trips_csv

# Timestamp window: 2013-07-01 .. 2014-06-30 (UTC).
_T0 = 1_372_636_800
_T1 = 1_404_086_400

_STEP_M = 140.0  # nominal spacing between fixes
_GPS_NOISE_M = 8.0
_DEST_NOISE_M = 150.0
_STAND_NOISE_M = 60.0


@dataclass(frozen=True)
class SynthConfig:
    bounds: tuple[float, float, float, float] = PORTO_BOUNDS
    n_hotspots: int = 12
    n_stands: int = 32
    stand_loyalty: float = 0.75  # chance a stand trip goes to its preferred hotspot
    slot_loyalty: float = 0.6  # same, for time-slot preference of street pickups
    min_points: int = 8
    max_points: int = 180


def _inner_box(bounds: tuple[float, float, float, float], margin: float = 0.1):
    lon_lo, lat_lo, lon_hi, lat_hi = bounds
    dlon, dlat = lon_hi - lon_lo, lat_hi - lat_lo
    return (
        lon_lo + margin * dlon,
        lat_lo + margin * dlat,
        lon_hi - margin * dlon,
        lat_hi - margin * dlat,
    )


def _uniform_point(rng: np.random.Generator, box) -> GeoPoint:
    lon_lo, lat_lo, lon_hi, lat_hi = box
    return GeoPoint(lon=rng.uniform(lon_lo, lon_hi), lat=rng.uniform(lat_lo, lat_hi))


def _jitter(rng: np.random.Generator, p: GeoPoint, sigma_m: float) -> GeoPoint:
    dx, dy = rng.normal(0.0, sigma_m, size=2)
    return unproject_xy(dx, dy, p)


def _route(rng: np.random.Generator, start: GeoPoint, dest: GeoPoint, cfg: SynthConfig) -> list[GeoPoint]:
    """Curved path from start to dest at roughly fixed metre spacing."""
    dx, dy = project_xy(dest, start)
    dist = math.hypot(dx, dy)
    n = int(round(dist / _STEP_M)) + int(rng.integers(0, 6))
    n = max(cfg.min_points, min(n, cfg.max_points))
    # Perpendicular detour: one gentle arc, amplitude well under the jump cap.
    if dist > 1.0:
        px, py = -dy / dist, dx / dist
    else:
        px, py = 0.0, 0.0
    amp = rng.uniform(0.0, 0.12) * dist
    phase = rng.uniform(0.8, 1.2) * math.pi
    points = []
    for i in range(n):
        t = i / (n - 1)
        bow = amp * math.sin(phase * t) * math.sin(math.pi * t)
        x = t * dx + bow * px + rng.normal(0.0, _GPS_NOISE_M)
        y = t * dy + bow * py + rng.normal(0.0, _GPS_NOISE_M)
        points.append(unproject_xy(x, y, start))
    points[-1] = dest
    return points


def make_trips(
    n: int, seed: int, cfg: SynthConfig = SynthConfig(), id_prefix: str = "S"
) -> list[Trip]:
    """Generate ``n`` complete, clean trips."""
    rng = np.random.default_rng(seed)
    box = _inner_box(cfg.bounds)
    hotspots = [_uniform_point(rng, box) for _ in range(cfg.n_hotspots)]
    stands = [_uniform_point(rng, box) for _ in range(cfg.n_stands)]
    stand_pref = rng.integers(0, cfg.n_hotspots, size=cfg.n_stands)
    slot_pref = rng.integers(0, cfg.n_hotspots, size=96)

    trips = []
    for i in range(n):
        timestamp = int(rng.integers(_T0, _T1))
        slot = (timestamp % 86_400) // 900
        roll = rng.random()
        if roll < 0.65:
            call_type = CallType.STAND
            stand_id = int(rng.integers(1, cfg.n_stands + 1))
            origin_call = None
            start = _jitter(rng, stands[stand_id - 1], _STAND_NOISE_M)
            if rng.random() < cfg.stand_loyalty:
                hotspot = int(stand_pref[stand_id - 1])
            else:
                hotspot = int(rng.integers(0, cfg.n_hotspots))
        else:
            call_type = CallType.CENTRAL if roll < 0.85 else CallType.STREET
            stand_id = None
            origin_call = int(rng.integers(2000, 60000)) if call_type is CallType.CENTRAL else None
            start = _uniform_point(rng, box)
            if rng.random() < cfg.slot_loyalty:
                hotspot = int(slot_pref[slot])
            else:
                hotspot = int(rng.integers(0, cfg.n_hotspots))
        dest = _jitter(rng, hotspots[hotspot], _DEST_NOISE_M)
        trips.append(
            Trip(
                trip_id=f"{id_prefix}{seed}_{i}",
                call_type=call_type,
                origin_call=origin_call,
                origin_stand=stand_id,
                taxi_id=20_000_000 + int(rng.integers(0, 442)),
                timestamp=timestamp,
                day_type=DayType.NORMAL,
                missing_data=False,
                points=tuple(_route(rng, start, dest, cfg)),
            )
        )
    return trips


def make_separated_trips(
    n: int,
    seed: int,
    min_separation_m: float = 600.0,
    cfg: SynthConfig = SynthConfig(),
    id_prefix: str = "V",
) -> list[Trip]:
    """Trips whose destinations are pairwise at least ``min_separation_m``
    apart, so each destination is unambiguously identified by the
    trajectory's end neighborhood.  Useful for memorization tests."""
    rng = np.random.default_rng(seed)
    box = _inner_box(cfg.bounds)
    anchor = GeoPoint(lon=(box[0] + box[2]) / 2, lat=(box[1] + box[3]) / 2)
    dests: list[GeoPoint] = []
    dest_xy: list[tuple[float, float]] = []
    guard = 0
    while len(dests) < n:
        guard += 1
        if guard > 1000 * n:
            raise ValueError(
                f"cannot place {n} destinations {min_separation_m} m apart in bounds"
            )
        cand = _uniform_point(rng, box)
        x, y = project_xy(cand, anchor)
        if all(math.hypot(x - cx, y - cy) >= min_separation_m for cx, cy in dest_xy):
            dests.append(cand)
            dest_xy.append((x, y))

    trips = []
    for i, dest in enumerate(dests):
        timestamp = int(rng.integers(_T0, _T1))
        start = _uniform_point(rng, box)
        trips.append(
            Trip(
                trip_id=f"{id_prefix}{seed}_{i}",
                call_type=CallType.STREET,
                origin_call=None,
                origin_stand=None,
                taxi_id=20_000_000 + int(rng.integers(0, 442)),
                timestamp=timestamp,
                day_type=DayType.NORMAL,
                missing_data=False,
                points=tuple(_route(rng, start, dest, cfg)),
            )
        )
    return trips


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Write a synthetic trip CSV.")
    parser.add_argument("--out", required=True, help="output CSV path")
    parser.add_argument("--trips", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    write_trips_csv(args.out, make_trips(args.trips, args.seed))
    print(f"wrote {args.trips} trips to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
