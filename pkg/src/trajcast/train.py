"""Mini-batch training loop and haversine evaluation.

Training is deterministic given (seed, config, data): the seed drives
shuffling, per-epoch truncation cuts, and parameter initialization, and
updates are applied serially in batch order.  Batch inputs may be prepared
by worker threads, but results are consumed in submission order so worker
count never changes the arithmetic.

When given trips, the loop draws a fresh truncation cut per trip per epoch
(uniform in [min_cut, 1]) as data augmentation; pre-built examples are used
as-is.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from trajcast import checkpoint, nn
from trajcast.geo import GeoPoint, haversine_m
from trajcast.ingest import Example, Trip, make_example
from trajcast.model import Network, haversine_loss

N_BUCKETS = 10
QUANTILES = (0.1, 0.25, 0.5, 0.75, 0.9)


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the state needed to diagnose it."""

    def __init__(self, epoch: int, batch: int, loss: float, grad_norm: float) -> None:
        super().__init__(
            f"non-finite loss {loss} at epoch {epoch} batch {batch} "
            f"(grad norm {grad_norm:.3g})"
        )
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        self.grad_norm = grad_norm

    def dump(self) -> dict:
        return {
            "epoch": self.epoch,
            "batch": self.batch,
            "loss": self.loss,
            "grad_norm": self.grad_norm,
        }


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    seed: int = 0
    checkpoint_interval: int = 0  # epochs between checkpoints; 0 = final only
    grad_clip: float = 10.0
    min_cut: float = 0.1  # lower bound of the per-epoch truncation draw
    workers: int = 1
    limit: int | None = None  # cap on training trips/examples

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.workers < 1:
            raise ValueError("epochs, batch_size, and workers must be positive")
        if self.lr < 0.0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if not 0.0 < self.min_cut <= 1.0:
            raise ValueError(f"min_cut must be in (0, 1], got {self.min_cut}")
        if self.grad_clip <= 0.0:
            raise ValueError(f"grad_clip must be positive, got {self.grad_clip}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "momentum": self.momentum,
            "seed": self.seed,
            "checkpoint_interval": self.checkpoint_interval,
            "grad_clip": self.grad_clip,
            "min_cut": self.min_cut,
            "workers": self.workers,
            "limit": self.limit,
        }


@dataclass
class TrainResult:
    network: Network
    loss_curve: list[float]
    log_records: list[dict]
    checkpoint_paths: list[str] = field(default_factory=list)


def _prepare(network: Network, example: Example) -> tuple[np.ndarray, tuple, GeoPoint]:
    return network.rasterize(example), example.meta, example.target


def train(
    network: Network,
    data: Sequence[Trip] | Sequence[Example],
    cfg: TrainConfig,
    checkpoint_dir: str | None = None,
    log_path: str | None = None,
    on_batch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train in place; returns the network plus per-batch loss curve.

    ``data`` may be trips (fresh truncation cut per epoch) or fixed
    examples.  A non-finite loss raises :class:`TrainingDivergedError`.
    """
    items = list(data)
    if cfg.limit is not None:
        items = items[: cfg.limit]
    if not items:
        raise ValueError("cannot train on an empty dataset")
    augment = isinstance(items[0], Trip)

    rng = np.random.default_rng(cfg.seed)
    if cfg.lr > 0.0:
        optimizer = nn.SGD(network.params(), lr=cfg.lr, momentum=cfg.momentum)
    else:
        optimizer = None

    result = TrainResult(network=network, loss_curve=[], log_records=[])
    log_file = open(log_path, "w") if log_path else None
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    started = time.monotonic()
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(items))
            for batch_no, lo in enumerate(range(0, len(items), cfg.batch_size), start=1):
                batch_idx = order[lo : lo + cfg.batch_size]
                if augment:
                    examples = [
                        make_example(items[i], cut=rng.uniform(cfg.min_cut, 1.0))
                        for i in batch_idx
                    ]
                else:
                    examples = [items[i] for i in batch_idx]

                if pool is not None:
                    prepared = list(pool.map(lambda ex: _prepare(network, ex), examples))
                else:
                    prepared = [_prepare(network, ex) for ex in examples]

                network.zero_grad()
                batch_loss = 0.0
                for pixels, meta, target in prepared:
                    pred = network.forward(pixels, meta)
                    loss, d_pred = haversine_loss(pred, target)
                    batch_loss += loss
                    network.backward(d_pred / len(prepared))
                batch_loss /= len(prepared)

                norm, clipped = nn.clip_grad_norm(network.params(), cfg.grad_clip)
                if not math.isfinite(batch_loss):
                    raise TrainingDivergedError(epoch, batch_no, batch_loss, norm)
                if optimizer is not None:
                    optimizer.step()

                record = {
                    "epoch": epoch,
                    "batch": batch_no,
                    "loss": batch_loss,
                    "grad_norm": norm,
                    "clipped": clipped,
                    "wall_time_s": round(time.monotonic() - started, 3),
                }
                result.loss_curve.append(batch_loss)
                result.log_records.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
                if on_batch:
                    on_batch(record)

            if (
                checkpoint_dir
                and cfg.checkpoint_interval > 0
                and epoch % cfg.checkpoint_interval == 0
                and epoch < cfg.epochs
            ):
                path = str(Path(checkpoint_dir) / f"epoch{epoch:04d}.ckpt")
                checkpoint.save_model(path, network)
                result.checkpoint_paths.append(path)

        if checkpoint_dir:
            path = str(Path(checkpoint_dir) / "final.ckpt")
            checkpoint.save_model(path, network)
            result.checkpoint_paths.append(path)
    finally:
        if pool is not None:
            pool.shutdown()
        if log_file:
            log_file.close()
    return result


class Predictor(Protocol):
    def predict(self, example: Example) -> GeoPoint: ...


def completeness_bucket(completeness: float) -> int:
    """1-based decile bucket: [0, 0.1) -> 1, ..., [0.9, 1.0] -> 10."""
    if not 0.0 <= completeness <= 1.0:
        raise ValueError(f"completeness must be in [0, 1], got {completeness}")
    return min(int(completeness * N_BUCKETS) + 1, N_BUCKETS)


@dataclass
class EvalReport:
    """Mean/quantile haversine error plus per-completeness-bucket means."""

    mean_m: float
    quantiles_m: dict[float, float]
    bucket_mean_m: list[float | None]  # None for empty buckets
    bucket_counts: list[int]
    count: int

    def to_dict(self) -> dict:
        return {
            "mean_m": self.mean_m,
            "quantiles_m": {str(q): v for q, v in self.quantiles_m.items()},
            "bucket_mean_m": self.bucket_mean_m,
            "bucket_counts": self.bucket_counts,
            "count": self.count,
        }

    def to_text(self) -> str:
        lines = [
            f"examples evaluated : {self.count}",
            f"mean error         : {self.mean_m:.1f} m",
        ]
        for q, v in self.quantiles_m.items():
            lines.append(f"p{int(q * 100):>2d} error          : {v:.1f} m")
        lines.append("completeness bucket -> mean error (count)")
        for i, (mean, n) in enumerate(zip(self.bucket_mean_m, self.bucket_counts)):
            lo, hi = i / N_BUCKETS, (i + 1) / N_BUCKETS
            shown = f"{mean:.1f} m" if mean is not None else "-"
            lines.append(f"  [{lo:.1f}, {hi:.1f}{']' if i == N_BUCKETS - 1 else ')'}: {shown} ({n})")
        return "\n".join(lines) + "\n"


def evaluate(predictor: Predictor, examples: Sequence[Example]) -> EvalReport:
    """Haversine error of a predictor over examples with recorded
    completeness ratios."""
    if not examples:
        raise ValueError("cannot evaluate an empty example set")
    errors = np.empty(len(examples))
    buckets = np.empty(len(examples), dtype=np.int64)
    for i, ex in enumerate(examples):
        if ex.completeness is None:
            raise ValueError("every evaluated example needs a completeness ratio")
        errors[i] = haversine_m(predictor.predict(ex), ex.target)
        buckets[i] = completeness_bucket(ex.completeness)

    bucket_mean: list[float | None] = []
    bucket_counts: list[int] = []
    for b in range(1, N_BUCKETS + 1):
        mask = buckets == b
        n = int(mask.sum())
        bucket_counts.append(n)
        bucket_mean.append(float(errors[mask].mean()) if n else None)

    return EvalReport(
        mean_m=float(errors.mean()),
        quantiles_m={q: float(np.quantile(errors, q)) for q in QUANTILES},
        bucket_mean_m=bucket_mean,
        bucket_counts=bucket_counts,
        count=len(examples),
    )
