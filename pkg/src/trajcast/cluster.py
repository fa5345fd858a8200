"""Mean-shift clustering of destination points into candidate centers.

Works in locally projected metres with a flat (uniform) kernel: each seed
repeatedly moves to the mean of all points within the bandwidth radius
until the shift drops below tolerance.  Converged modes closer than half a
bandwidth are merged.  Input order never matters: points are put into a
canonical order before any arithmetic, so the result is permutation
invariant.

Two guarantees hold unconditionally on the output:

* every input point lies within one bandwidth of some center — points
  stranded by mode drift are promoted to their own center;
* all returned centers are pairwise at least half a bandwidth apart.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from trajcast.geo import GeoPoint, project_xy, unproject_xy

DEFAULT_BANDWIDTH_M = 500.0
MAX_SEEDS = 20_000


@dataclass(frozen=True)
class ClusterSet:
    """Candidate destination centers with the bandwidth that produced them."""

    centers: tuple[GeoPoint, ...]
    bandwidth_m: float
    source_count: int

    def __len__(self) -> int:
        return len(self.centers)

    def as_array(self) -> np.ndarray:
        """Centers as a (K, 2) array of (lon, lat)."""
        return np.array([[c.lon, c.lat] for c in self.centers], dtype=np.float64)


class _SpatialHash:
    """Uniform binning at bandwidth pitch; neighbors come from 3x3 bins."""

    def __init__(self, xy: np.ndarray, bandwidth: float) -> None:
        self.xy = xy
        self.bandwidth = bandwidth
        self.bins: dict[tuple[int, int], list[int]] = {}
        keys = np.floor(xy / bandwidth).astype(np.int64)
        for i, (kx, ky) in enumerate(keys):
            self.bins.setdefault((int(kx), int(ky)), []).append(i)

    def within(self, x: float, y: float) -> np.ndarray:
        """Points within ``bandwidth`` of (x, y), as an index array."""
        kx, ky = int(np.floor(x / self.bandwidth)), int(np.floor(y / self.bandwidth))
        candidates: list[int] = []
        for bx in (kx - 1, kx, kx + 1):
            for by in (ky - 1, ky, ky + 1):
                candidates.extend(self.bins.get((bx, by), ()))
        if not candidates:
            return np.empty(0, dtype=np.int64)
        idx = np.asarray(candidates, dtype=np.int64)
        d = self.xy[idx] - (x, y)
        mask = (d * d).sum(axis=1) <= self.bandwidth * self.bandwidth
        return idx[mask]


def _converge(seed: np.ndarray, grid: _SpatialHash, max_iter: int, tol: float) -> np.ndarray:
    pos = seed.astype(np.float64).copy()
    for _ in range(max_iter):
        members = grid.within(pos[0], pos[1])
        if members.size == 0:
            break
        new_pos = grid.xy[members].mean(axis=0)
        shift = float(np.hypot(*(new_pos - pos)))
        pos = new_pos
        if shift < tol:
            break
    return pos


def _canonical(xy: np.ndarray) -> np.ndarray:
    return xy[np.lexsort((xy[:, 1], xy[:, 0]))]


def _merge_modes(modes: np.ndarray, min_dist: float) -> np.ndarray:
    """Repeatedly merge mode groups closer than ``min_dist`` to their mean.

    Each pass assigns every mode to its nearest accepted group if that
    group is within ``min_dist``; passes repeat until nothing merges, so
    the result is guaranteed pairwise separated.
    """
    current = _canonical(modes)
    min_dist2 = min_dist * min_dist
    while len(current) > 1:
        reps = np.empty_like(current)
        sums = np.zeros_like(current)
        counts = np.zeros(len(current))
        n = 0
        changed = False
        for mode in current:
            if n > 0:
                d2 = ((reps[:n] - mode) ** 2).sum(axis=1)
                j = int(np.argmin(d2))
                if d2[j] < min_dist2:
                    sums[j] += mode
                    counts[j] += 1
                    reps[j] = sums[j] / counts[j]
                    changed = True
                    continue
            reps[n] = mode
            sums[n] = mode
            counts[n] = 1
            n += 1
        current = _canonical(reps[:n])
        if not changed:
            break
    return current


def mean_shift(
    points: Sequence[GeoPoint] | Iterable[GeoPoint],
    bandwidth_m: float = DEFAULT_BANDWIDTH_M,
    max_iter: int = 300,
    tol_m: float = 0.1,
) -> ClusterSet:
    """Cluster points by flat-kernel mean shift in projected metres.

    Seeds are the points themselves, subsampled uniformly to ``MAX_SEEDS``
    for large inputs.  Returns centers sorted by (lon, lat).
    """
    pts = list(points)
    if not pts:
        raise ValueError("cannot cluster an empty point set")
    if bandwidth_m <= 0.0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth_m}")

    # Canonical order makes everything downstream permutation invariant.
    pts.sort(key=lambda p: (p.lon, p.lat))
    anchor = pts[0]
    xy = np.array([project_xy(p, anchor) for p in pts], dtype=np.float64)

    if len(pts) > MAX_SEEDS:
        rng = np.random.default_rng(0)
        seed_idx = np.sort(rng.choice(len(pts), size=MAX_SEEDS, replace=False))
    else:
        seed_idx = np.arange(len(pts))

    grid = _SpatialHash(xy, bandwidth_m)
    modes = np.array([_converge(xy[i], grid, max_iter, tol_m) for i in seed_idx])
    centers_xy = _merge_modes(modes, bandwidth_m / 2.0)

    # Promote stranded points to centers of their own.  Adding centers only
    # shrinks the stranded set, so we prefilter against the merged centers
    # and re-check the survivors sequentially in canonical point order.
    bw2 = bandwidth_m * bandwidth_m
    d2_min = np.empty(len(xy))
    for lo in range(0, len(xy), 2048):
        chunk = xy[lo : lo + 2048]
        d2 = ((chunk[:, None, :] - centers_xy[None, :, :]) ** 2).sum(axis=2)
        d2_min[lo : lo + 2048] = d2.min(axis=1)
    for i in np.flatnonzero(d2_min > bw2):
        d = centers_xy - xy[i]
        if float((d * d).sum(axis=1).min()) > bw2:
            centers_xy = np.vstack([centers_xy, xy[i]])
    centers_xy = _canonical(centers_xy)

    centers = tuple(unproject_xy(x, y, anchor) for x, y in centers_xy)
    return ClusterSet(centers=centers, bandwidth_m=bandwidth_m, source_count=len(pts))


def save_centers(path: str, clusters: ClusterSet) -> None:
    """Write centers as a two-column (lon lat) text file.

    Comment lines carry the bandwidth and source count so a reloaded set is
    self-describing.
    """
    with open(path, "w") as fh:
        fh.write(f"# bandwidth_m={clusters.bandwidth_m!r}\n")
        fh.write(f"# source_count={clusters.source_count}\n")
        for c in clusters.centers:
            fh.write(f"{c.lon!r} {c.lat!r}\n")


def load_centers(path: str) -> ClusterSet:
    bandwidth = DEFAULT_BANDWIDTH_M
    source_count = 0
    centers: list[GeoPoint] = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line.lstrip("#").strip()
                if body.startswith("bandwidth_m="):
                    bandwidth = float(body.split("=", 1)[1])
                elif body.startswith("source_count="):
                    source_count = int(body.split("=", 1)[1])
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{line_no}: expected two columns, got {line!r}")
            centers.append(GeoPoint(lon=float(parts[0]), lat=float(parts[1])))
    if not centers:
        raise ValueError(f"{path}: no centers found")
    return ClusterSet(
        centers=tuple(centers), bandwidth_m=bandwidth, source_count=source_count
    )
