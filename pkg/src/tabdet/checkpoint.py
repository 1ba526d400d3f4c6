"""Parameter checkpoints.

Layout: an 8-byte little-endian header length, a UTF-8 JSON header
``{"params": [{"name", "shape", "offset"}, ...], "meta": {...}}``, then the
parameters as a flat run of little-endian float64 values.  ``offset`` counts
values, not bytes, from the start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TDCK"


class CheckpointError(ValueError):
    pass


def save_params(path: str | Path, params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    offset = 0
    for name, arr in params.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += int(np.prod(arr.shape, dtype=np.int64))
    header = json.dumps({"params": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for arr in params.values():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    try:
        header = json.loads(raw[12 : 12 + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    payload = np.frombuffer(raw[12 + hlen :], dtype="<f8")
    out = {}
    for e in header["params"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        chunk = payload[e["offset"] : e["offset"] + n]
        if chunk.size != n:
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        out[e["name"]] = chunk.astype(np.float64).reshape(e["shape"])
    return out, header.get("meta", {})
