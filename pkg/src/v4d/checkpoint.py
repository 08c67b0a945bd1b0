"""Checkpoint file format: model spec, parameters, optimizer state, metadata.

Layout: magic ``V4DC``, u32 little-endian major version, u64-length-prefixed
canonical JSON header (model spec, input shape, metadata), then two
count-prefixed sections of (name, tensor record) pairs: parameters and
optimizer tensors. Names are u64-length-prefixed UTF-8; tensor records are
the ``V4DT`` format from :mod:`v4d.tensor`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .model import ModelSpec, Network, build_model
from .tensor import read_tensor, write_tensor

CHECKPOINT_MAGIC = b"V4DC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    spec: ModelSpec
    input_shape: tuple[int, ...]
    params: dict
    optimizer: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def restore_network(self) -> Network:
        net = build_model(self.spec, self.input_shape)
        net.set_parameters(self.params)
        return net


def _write_named(f, items: dict):
    f.write(struct.pack("<Q", len(items)))
    for name, arr in items.items():
        raw = name.encode("utf-8")
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        write_tensor(f, np.atleast_1d(np.asarray(arr, dtype=np.float64)))


def _read_named(f) -> dict:
    (count,) = struct.unpack("<Q", f.read(8))
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<Q", f.read(8))
        name = f.read(nlen).decode("utf-8")
        out[name] = read_tensor(f)
    return out


def save_checkpoint(path, net: Network, optimizer: dict | None = None,
                    metadata: dict | None = None) -> None:
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_spec": net.spec.to_dict(),
        "input_shape": list(net.input_shape),
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        _write_named(f, net.parameters())
        _write_named(f, optimizer or {})


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version > CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {version} is newer than supported "
                f"{CHECKPOINT_VERSION}"
            )
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        params = _read_named(f)
        optimizer = _read_named(f)
    return Checkpoint(
        spec=ModelSpec.from_dict(header["model_spec"]),
        input_shape=tuple(header["input_shape"]),
        params=params,
        optimizer=optimizer,
        metadata=header.get("metadata", {}),
    )
