"""Network assembly: conv/pool stages, metadata embeddings, centroid head.

Two variants share one architecture and differ only in their input raster:

* ``basic`` — one channel over a fixed city-wide grid;
* ``local_enhancement`` — four channels from start/end windows.

The stack is conv -> pool repeated per stage, flattened, joined with the
metadata embedding vector in a tanh dense layer, projected by a linear
layer onto one logit per candidate center, and finished by the softmax
centroid head.  The logits are deliberately unbounded: squashing them
would cap how sharply the head can commit to a single center.  The
training objective is the prediction's great-circle distance to the true
destination, in metres, differentiated directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from trajcast import nn
from trajcast.cluster import ClusterSet
from trajcast.geo import EARTH_RADIUS_M, GeoPoint, Grid, PORTO_BOUNDS, grid_from_bounds
from trajcast.ingest import META_VOCAB, Example
from trajcast.raster import rasterize_basic, stack_le

VARIANTS = ("basic", "local_enhancement")

# Below this separation the distance gradient is numerically singular and
# carries no useful direction; clamp it to zero.
LOSS_GRAD_CLAMP_M = 1.0


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and raster-geometry knobs.

    ``grid_m`` is the number of rows (= columns) of the input raster.  For
    the basic variant the grid covers ``bounds``; for local enhancement
    each window is ``grid_m`` cells of ``cell_m`` metres.  ``le_norm``
    selects the normalization frame for window pixel values: "global"
    normalizes against ``bounds`` so values encode absolute position,
    "window" against each window's own extent.
    """

    variant: str = "basic"
    grid_m: int = 64
    cell_m: float = 100.0
    bounds: tuple[float, float, float, float] = PORTO_BOUNDS
    conv_channels: tuple[int, ...] = (16, 32)
    kernel_size: int = 3
    pool_size: int = 2
    dense_width: int = 256
    embed_dim: int = 10
    le_norm: str = "global"
    centers_path: str | None = None

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError(f"kernel size must be odd, got {self.kernel_size}")
        if self.pool_size < 1:
            raise ValueError(f"pool size must be >= 1, got {self.pool_size}")
        if self.grid_m < 1:
            raise ValueError(f"grid size must be >= 1, got {self.grid_m}")
        if not self.conv_channels:
            raise ValueError("need at least one conv stage")
        if self.dense_width < 1:
            raise ValueError(f"dense width must be >= 1, got {self.dense_width}")
        if self.embed_dim < 0:
            raise ValueError(f"embedding dim must be >= 0, got {self.embed_dim}")
        if self.le_norm not in ("global", "window"):
            raise ValueError(f"le_norm must be 'global' or 'window', got {self.le_norm!r}")

    @property
    def in_channels(self) -> int:
        return 1 if self.variant == "basic" else 4

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "grid_m": self.grid_m,
            "cell_m": self.cell_m,
            "bounds": list(self.bounds),
            "conv_channels": list(self.conv_channels),
            "kernel_size": self.kernel_size,
            "pool_size": self.pool_size,
            "dense_width": self.dense_width,
            "embed_dim": self.embed_dim,
            "le_norm": self.le_norm,
            "centers_path": self.centers_path,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "bounds" in d:
            d["bounds"] = tuple(d["bounds"])
        if "conv_channels" in d:
            d["conv_channels"] = tuple(d["conv_channels"])
        return cls(**d)


def spatial_sizes(config: ModelConfig) -> list[int]:
    """Spatial edge length after each conv+pool stage (conv is same-size)."""
    sizes = []
    size = config.grid_m
    for _ in config.conv_channels:
        size = size // config.pool_size
        sizes.append(size)
    return sizes


class Network:
    """A built model: layer stack, embeddings, candidate centers."""

    def __init__(self, config: ModelConfig, centers: ClusterSet, seed: int = 0) -> None:
        if len(centers) < 1:
            raise ValueError("need at least one candidate center")
        final = spatial_sizes(config)[-1]
        if final < 1:
            raise ValueError(
                f"grid {config.grid_m} collapses to nothing after "
                f"{len(config.conv_channels)} pool stages of size {config.pool_size}"
            )
        self.config = config
        self.centers = centers
        self.seed = seed
        rng = np.random.default_rng(seed)

        layers: list = []
        in_ch = config.in_channels
        for i, out_ch in enumerate(config.conv_channels, start=1):
            layers.append(
                nn.Conv2d(in_ch, out_ch, config.kernel_size, rng, name=f"conv{i}")
            )
            layers.append(nn.MaxPool2d(config.pool_size))
            in_ch = out_ch
        self.features = nn.Stack(layers)

        self._feat_shape = (config.conv_channels[-1], final, final)
        flat_dim = int(np.prod(self._feat_shape))
        self.embeddings = [
            nn.Embedding(vocab, config.embed_dim, rng, name=f"embed{i}")
            for i, vocab in enumerate(META_VOCAB)
        ]
        side_dim = config.embed_dim * len(META_VOCAB)
        self.dense = nn.DenseTanh(flat_dim, side_dim, config.dense_width, rng, name="dense")
        self.logits = nn.Linear(config.dense_width, len(centers), rng, name="logits")
        self.head = nn.CentroidHead(centers.as_array())

        if config.variant == "basic":
            self._grid: Grid | None = grid_from_bounds(*config.bounds, config.grid_m, config.grid_m)
        else:
            self._grid = None

    # --- parameters -------------------------------------------------------

    def params(self) -> list[nn.Tensor]:
        out = list(self.features.params())
        for emb in self.embeddings:
            out.extend(emb.params())
        out.extend(self.dense.params())
        out.extend(self.logits.params())
        return out

    def named_params(self) -> list[tuple[str, nn.Tensor]]:
        return [(p.name, p) for p in self.params()]

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    # --- data path ---------------------------------------------------------

    @property
    def basic_grid(self) -> Grid:
        if self._grid is None:
            raise ValueError("local-enhancement models have no global grid")
        return self._grid

    def rasterize(self, example: Example) -> np.ndarray:
        if self.config.variant == "basic":
            return rasterize_basic(example.prefix, self.basic_grid).pixels
        bounds = self.config.bounds if self.config.le_norm == "global" else None
        return stack_le(
            example.prefix, self.config.grid_m, self.config.cell_m, norm_bounds=bounds
        ).pixels

    def forward(self, pixels: np.ndarray, meta: Sequence[int]) -> np.ndarray:
        """Run one input through the network; returns predicted (lon, lat)."""
        feat = self.features.forward(pixels)
        main = feat.reshape(-1)
        side = np.concatenate([emb.forward(code) for emb, code in zip(self.embeddings, meta)])
        hidden = self.dense.forward(main, side)
        return self.head.forward(self.logits.forward(hidden))

    def backward(self, d_pred: np.ndarray) -> np.ndarray:
        """Reverse pass from d(loss)/d(prediction); returns the input-image
        gradient and accumulates parameter gradients."""
        de = self.head.backward(d_pred)
        d_hidden = self.logits.backward(de)
        d_main, d_side = self.dense.backward(d_hidden)
        dim = self.config.embed_dim
        for i, emb in enumerate(self.embeddings):
            emb.backward(d_side[i * dim : (i + 1) * dim])
        return self.features.backward(d_main.reshape(self._feat_shape))

    def predict(self, example: Example) -> GeoPoint:
        pred = self.forward(self.rasterize(example), example.meta)
        return GeoPoint(lon=float(pred[0]), lat=float(pred[1]))


def haversine_loss(pred: np.ndarray, target: GeoPoint) -> tuple[float, np.ndarray]:
    """Great-circle distance in metres and its gradient w.r.t. pred.

    ``pred`` is (lon, lat) in degrees.  The gradient of the distance is
    singular at zero separation; below ``LOSS_GRAD_CLAMP_M`` it is clamped
    to zero.
    """
    lon_p, lat_p = float(pred[0]), float(pred[1])
    phi_p = math.radians(lat_p)
    phi_t = math.radians(target.lat)
    d_phi = math.radians(lat_p - target.lat)
    d_lam = math.radians(lon_p - target.lon)
    sin_dphi = math.sin(d_phi / 2.0)
    sin_dlam = math.sin(d_lam / 2.0)
    cos_pp = math.cos(phi_p)
    cos_pt = math.cos(phi_t)
    h = sin_dphi**2 + cos_pp * cos_pt * sin_dlam**2
    h = min(h, 1.0)
    dist = 2.0 * EARTH_RADIUS_M * math.atan2(math.sqrt(h), math.sqrt(1.0 - h))

    if dist < LOSS_GRAD_CLAMP_M or h >= 1.0:
        return dist, np.zeros(2)

    dd_dh = EARTH_RADIUS_M / math.sqrt(h * (1.0 - h))
    dh_dphi = 0.5 * math.sin(d_phi) - math.sin(phi_p) * cos_pt * sin_dlam**2
    dh_dlam = 0.5 * cos_pp * cos_pt * math.sin(d_lam)
    deg = math.pi / 180.0
    return dist, np.array([dd_dh * dh_dlam * deg, dd_dh * dh_dphi * deg])


class MeanDestinationBaseline:
    """Constant predictor: the mean of the training destinations."""

    def __init__(self, destinations: Sequence[GeoPoint]) -> None:
        if not destinations:
            raise ValueError("baseline needs at least one destination")
        lon = sum(p.lon for p in destinations) / len(destinations)
        lat = sum(p.lat for p in destinations) / len(destinations)
        self.center = GeoPoint(lon=lon, lat=lat)

    def predict(self, example: Example) -> GeoPoint:
        return self.center
