"""Binary parameter checkpoint: JSON header plus raw little-endian float64.

Layout: 8-byte magic, u64-LE header length, UTF-8 JSON header
``{"config_hash": ..., "params": [{"name": ..., "shape": [...]}, ...]}``,
then each parameter's row-major float64 data in header order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"RFCKPT1\n"


def save_checkpoint(path, params, config_hash: str) -> None:
    """Write parameters (ParamStore or dict of arrays) with a config hash."""
    if hasattr(params, "arrays"):
        params = params.arrays()
    names = sorted(params)
    header = {
        "config_hash": config_hash,
        "params": [{"name": n, "shape": list(np.asarray(params[n]).shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for n in names:
            arr = np.ascontiguousarray(params[n], dtype="<f8")
            f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    """Read a checkpoint; returns (name -> array, config_hash)."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        out: dict[str, np.ndarray] = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"{path}: truncated data for {entry['name']!r}")
            out[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return out, header["config_hash"]
