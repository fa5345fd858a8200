"""Trip record parsing, validation, and example construction.

Input is the nine-column taxi trip CSV: TRIP_ID, CALL_TYPE, ORIGIN_CALL,
ORIGIN_STAND, TAXI_ID, TIMESTAMP, DAY_TYPE, MISSING_DATA, POLYLINE.  The
POLYLINE field is a JSON array of [lon, lat] pairs — longitude first, per
the dataset convention; internally points are (lon, lat) as well.

Parsing is streamable and per-row failures are collected, never fatal.
Everything downstream of parsing is deterministic given an explicit seed.
"""

from __future__ import annotations

import csv
import enum
import json
import math
import random
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from typing import IO, Iterable, Sequence

from trajcast.geo import GeoPoint, haversine_m

CSV_HEADER = [
    "TRIP_ID",
    "CALL_TYPE",
    "ORIGIN_CALL",
    "ORIGIN_STAND",
    "TAXI_ID",
    "TIMESTAMP",
    "DAY_TYPE",
    "MISSING_DATA",
    "POLYLINE",
]

# Category counts for each metadata field, in encode_meta order:
# quarter-hour of day, day of week, week of year, call type,
# origin stand bucket (0 = absent), hashed taxi id.
META_VOCAB = (96, 7, 52, 3, 64, 448)

# Consecutive GPS fixes more than this far apart are treated as noise and
# the whole trip is discarded (at 15 s sampling this is > 720 km/h).
MAX_JUMP_M = 3_000.0


class SchemaError(ValueError):
    """The input stream does not carry the expected CSV schema."""


class CallType(enum.Enum):
    CENTRAL = "A"
    STAND = "B"
    STREET = "C"


class DayType(enum.Enum):
    NORMAL = "A"
    HOLIDAY = "B"
    PRE_HOLIDAY = "C"


@dataclass(frozen=True)
class Trip:
    """One taxi journey as recorded in the source data."""

    trip_id: str
    call_type: CallType
    origin_call: int | None
    origin_stand: int | None
    taxi_id: int
    timestamp: int
    day_type: DayType
    missing_data: bool
    points: tuple[GeoPoint, ...]

    @property
    def destination(self) -> GeoPoint:
        if not self.points:
            raise ValueError(f"trip {self.trip_id} has no points")
        return self.points[-1]

    def truncated(self, n: int) -> "Trip":
        return replace(self, points=self.points[:n])


@dataclass(frozen=True)
class Example:
    """An observed trajectory prefix with its known final destination."""

    prefix: tuple[GeoPoint, ...]
    meta: tuple[int, int, int, int, int, int]
    target: GeoPoint
    completeness: float | None = None


@dataclass(frozen=True)
class RowError:
    line: int
    message: str


@dataclass
class ParseReport:
    trips: list[Trip]
    errors: list[RowError]


def _parse_optional_int(raw: str) -> int | None:
    raw = raw.strip()
    if raw in ("", "NA"):
        return None
    return int(float(raw))  # the dataset writes some ids as "12.0"


def _parse_polyline(raw: str) -> tuple[GeoPoint, ...]:
    try:
        pairs = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ValueError(f"POLYLINE is not valid JSON: {exc}") from exc
    if not isinstance(pairs, list):
        raise ValueError("POLYLINE must be a JSON array")
    points = []
    for pair in pairs:
        if not (isinstance(pair, (list, tuple)) and len(pair) == 2):
            raise ValueError(f"POLYLINE entry {pair!r} is not a [lon, lat] pair")
        lon, lat = float(pair[0]), float(pair[1])
        points.append(GeoPoint(lon=lon, lat=lat))
    return tuple(points)


def _parse_row(row: Sequence[str]) -> Trip:
    if len(row) != len(CSV_HEADER):
        raise ValueError(f"expected {len(CSV_HEADER)} columns, got {len(row)}")
    (trip_id, call_type, origin_call, origin_stand, taxi_id, timestamp,
     day_type, missing_data, polyline) = row
    missing = missing_data.strip().lower()
    if missing not in ("true", "false"):
        raise ValueError(f"MISSING_DATA must be True/False, got {missing_data!r}")
    return Trip(
        trip_id=trip_id,
        call_type=CallType(call_type.strip()),
        origin_call=_parse_optional_int(origin_call),
        origin_stand=_parse_optional_int(origin_stand),
        taxi_id=int(taxi_id),
        timestamp=int(timestamp),
        day_type=DayType(day_type.strip()),
        missing_data=missing == "true",
        points=_parse_polyline(polyline),
    )


def parse_trips(stream: IO[str] | Iterable[str], limit: int | None = None) -> ParseReport:
    """Parse trips from a CSV stream; malformed rows are reported, not fatal.

    Raises :class:`SchemaError` if the header row is missing or does not
    match the nine-column schema.
    """
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("empty input: no header row") from None
    if [h.strip() for h in header] != CSV_HEADER:
        raise SchemaError(f"unexpected header {header!r}")

    report = ParseReport(trips=[], errors=[])
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            report.trips.append(_parse_row(row))
        except (ValueError, KeyError) as exc:
            report.errors.append(RowError(line=line, message=str(exc)))
            continue
        if limit is not None and len(report.trips) >= limit:
            break
    return report


def trip_to_row(trip: Trip) -> list[str]:
    """Serialize a trip back to its CSV row form (inverse of parsing)."""
    polyline = json.dumps(
        [[p.lon, p.lat] for p in trip.points], separators=(",", ":")
    )
    return [
        trip.trip_id,
        trip.call_type.value,
        "" if trip.origin_call is None else str(trip.origin_call),
        "" if trip.origin_stand is None else str(trip.origin_stand),
        str(trip.taxi_id),
        str(trip.timestamp),
        trip.day_type.value,
        str(trip.missing_data),
        polyline,
    ]


def write_trips_csv(path: str, trips: Iterable[Trip]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_ALL, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for trip in trips:
            writer.writerow(trip_to_row(trip))


def rejection_reason(trip: Trip) -> str | None:
    """Why a trip cannot be used for training, or None if it can.

    These checks are stable under truncation: a rejected trip stays
    rejected when its point sequence is shortened.  The GPS-jump filter is
    separate (see :func:`has_gps_jump`) because a jump is evidence the
    whole recording is noise, not a property of any particular prefix.
    """
    if trip.missing_data:
        return "missing_data flag set"
    if len(trip.points) < 2:
        return f"only {len(trip.points)} point(s)"
    return None


def has_gps_jump(trip: Trip, max_jump_m: float = MAX_JUMP_M) -> bool:
    """True if any consecutive fix pair is implausibly far apart."""
    pts = trip.points
    return any(
        haversine_m(pts[i], pts[i + 1]) > max_jump_m for i in range(len(pts) - 1)
    )


def clean_trips(trips: Iterable[Trip]) -> list[Trip]:
    """Keep trips that pass validation and the GPS-jump filter."""
    return [t for t in trips if rejection_reason(t) is None and not has_gps_jump(t)]


def encode_meta(trip: Trip) -> tuple[int, int, int, int, int, int]:
    """Encode trip metadata as category codes sized per ``META_VOCAB``."""
    when = datetime.fromtimestamp(trip.timestamp, tz=timezone.utc)
    quarter_hour = (trip.timestamp % 86_400) // 900
    weekday = when.weekday()
    week = (when.isocalendar().week - 1) % 52
    call = {"A": 0, "B": 1, "C": 2}[trip.call_type.value]
    if trip.origin_stand is None or trip.origin_stand < 1:
        stand = 0
    else:
        stand = 1 + (trip.origin_stand - 1) % 63
    taxi = trip.taxi_id % 448
    return (quarter_hour, weekday, week, call, stand, taxi)


def make_example(trip: Trip, cut: float) -> Example:
    """Truncate a trip to the first ceil(cut * N) points and pair it with
    its destination.

    The prefix keeps at least one point, and for cut < 1 never includes the
    final point, so the target is only visible at completeness 1.
    """
    if not 0.0 < cut <= 1.0:
        raise ValueError(f"cut must be in (0, 1], got {cut}")
    reason = rejection_reason(trip)
    if reason is not None:
        raise ValueError(f"trip {trip.trip_id} not usable: {reason}")
    n_total = len(trip.points)
    if cut == 1.0:
        n = n_total
    else:
        n = max(1, min(math.ceil(cut * n_total), n_total - 1))
    return Example(
        prefix=trip.points[:n],
        meta=encode_meta(trip),
        target=trip.points[-1],
        completeness=cut,
    )


def split(
    trips: Sequence[Trip], seed: int, test_fraction: float
) -> tuple[list[Trip], list[Example]]:
    """Deterministic train/test split.

    Test trips become examples truncated at a uniform random completeness
    ratio in (0, 1], recorded on each example for completeness-bucket
    reporting.  Trips must already be clean (see :func:`clean_trips`).
    """
    if not trips:
        raise ValueError("cannot split an empty trip set")
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = random.Random(seed)
    order = list(trips)
    rng.shuffle(order)
    n_test = min(max(int(round(len(order) * test_fraction)), 1), len(order) - 1)
    test_trips, train_trips = order[:n_test], order[n_test:]
    test_examples = [make_example(t, cut=1.0 - rng.random()) for t in test_trips]
    return train_trips, test_examples


# --- canonical example records -------------------------------------------
#
# One JSON object per line:
#   {"prefix": [[lon, lat], ...], "meta": [q, d, w, c, s, t],
#    "target": [lon, lat], "completeness": float or null}


def write_examples(path: str, examples: Iterable[Example]) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            record = {
                "prefix": [[p.lon, p.lat] for p in ex.prefix],
                "meta": list(ex.meta),
                "target": [ex.target.lon, ex.target.lat],
                "completeness": ex.completeness,
            }
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")


def read_examples(path: str) -> list[Example]:
    examples = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                examples.append(
                    Example(
                        prefix=tuple(GeoPoint(lon=q[0], lat=q[1]) for q in record["prefix"]),
                        meta=tuple(record["meta"]),
                        target=GeoPoint(lon=record["target"][0], lat=record["target"][1]),
                        completeness=record["completeness"],
                    )
                )
            except (KeyError, IndexError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{line_no}: bad example record: {exc}") from exc
    return examples
