"""Checkpoint file: 8-byte header length, JSON header, little-endian float64 blob."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ShapeMismatch

MAGIC = b"VRCK"


def _layer_specs(module) -> dict:
    from .layers import Module
    specs = {}

    def walk(m, prefix):
        specs[prefix or "<root>"] = m.spec()
        for name, value in vars(m).items():
            if isinstance(value, Module):
                walk(value, f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        walk(item, f"{prefix}{name}.{i}.")
    walk(module, "")
    return specs


def save_checkpoint(path, module, extra: dict | None = None) -> None:
    names, shapes, blobs = [], [], []
    for name, p in module.named_parameters():
        names.append(name)
        shapes.append(list(p.shape))
        blobs.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    header = {
        "format": "vascreg-checkpoint/1",
        "layers": _layer_specs(module),
        "params": [{"name": n, "shape": s} for n, s in zip(names, shapes)],
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def read_checkpoint(path):
    """Return (header dict, {name: array})."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[4:12])
    header = json.loads(data[12:12 + n])
    offset = 12 + n
    params = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"]))
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        params[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
        offset += 8 * count
    if offset != len(data):
        raise ValueError(f"{path}: trailing bytes after parameter blob")
    return header, params


def load_into(module, params: dict) -> None:
    for name, p in module.named_parameters():
        if name not in params:
            raise ShapeMismatch(f"checkpoint lacks parameter {name}")
        if params[name].shape != p.shape:
            raise ShapeMismatch(f"{name}: checkpoint shape {params[name].shape} != {p.shape}")
        p.data = params[name].copy()
