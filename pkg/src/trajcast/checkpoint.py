"""Self-describing binary model checkpoints.

Byte layout, all integers little-endian:

    offset  size  field
    0       4     magic b"TJCK"
    4       4     format version, uint32 (currently 1)
    8       4     metadata length L, uint32
    12      L     metadata, UTF-8 JSON with sorted keys:
                    {"bandwidth_m": float, "centers": [[lon, lat], ...],
                     "config": {...ModelConfig...}, "seed": int,
                     "source_count": int}
    12+L    4     tensor count T, uint32
    then, per tensor, in the model's canonical parameter order:
            4     name length, uint32
            *     name, UTF-8
            4     ndim, uint32
            8*nd  dims, uint64 each
            8*n   values, float64 little-endian, C row-major

Writing the same model twice produces identical bytes: JSON keys are
sorted, floats serialize via repr, and tensor order is fixed by the model.
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO

import numpy as np

from trajcast.cluster import ClusterSet
from trajcast.geo import GeoPoint
from trajcast.model import ModelConfig, Network

MAGIC = b"TJCK"
VERSION = 1


class CheckpointError(ValueError):
    """The file is not a readable checkpoint of a supported version."""


def _write_u32(fh: BinaryIO, value: int) -> None:
    fh.write(struct.pack("<I", value))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def _read_u32(fh: BinaryIO) -> int:
    return struct.unpack("<I", _read_exact(fh, 4))[0]


def save_model(path: str, network: Network) -> None:
    meta = {
        "bandwidth_m": network.centers.bandwidth_m,
        "centers": [[c.lon, c.lat] for c in network.centers.centers],
        "config": network.config.to_dict(),
        "seed": network.seed,
        "source_count": network.centers.source_count,
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    tensors = network.named_params()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        _write_u32(fh, VERSION)
        _write_u32(fh, len(meta_bytes))
        fh.write(meta_bytes)
        _write_u32(fh, len(tensors))
        for name, tensor in tensors:
            encoded = name.encode()
            _write_u32(fh, len(encoded))
            fh.write(encoded)
            _write_u32(fh, tensor.values.ndim)
            for dim in tensor.values.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(np.ascontiguousarray(tensor.values, dtype="<f8").tobytes())


def load_model(path: str) -> Network:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a model checkpoint")
        version = _read_u32(fh)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        meta = json.loads(_read_exact(fh, _read_u32(fh)).decode())
        config = ModelConfig.from_dict(meta["config"])
        centers = ClusterSet(
            centers=tuple(GeoPoint(lon=c[0], lat=c[1]) for c in meta["centers"]),
            bandwidth_m=meta["bandwidth_m"],
            source_count=meta["source_count"],
        )
        network = Network(config, centers, seed=meta["seed"])

        count = _read_u32(fh)
        expected = network.named_params()
        if count != len(expected):
            raise CheckpointError(
                f"{path}: has {count} tensors, model expects {len(expected)}"
            )
        for name, tensor in expected:
            stored_name = _read_exact(fh, _read_u32(fh)).decode()
            if stored_name != name:
                raise CheckpointError(f"{path}: tensor {stored_name!r} where {name!r} expected")
            ndim = _read_u32(fh)
            shape = tuple(
                struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(ndim)
            )
            if shape != tensor.values.shape:
                raise CheckpointError(
                    f"{path}: tensor {name} has shape {shape}, expected {tensor.values.shape}"
                )
            n_bytes = 8 * int(np.prod(shape)) if shape else 8
            data = np.frombuffer(_read_exact(fh, n_bytes), dtype="<f8").reshape(shape)
            tensor.values[...] = data
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last tensor")
    return network
