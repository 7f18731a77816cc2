"""Checkpoint files.

Layout::

    LATTICENET-CHECKPOINT 1\\n
    <header length in bytes>\\n
    <JSON header>
    <payload: every tensor as contiguous little-endian float32, in directory order>

The header holds the model spec, free-form metadata and a tensor directory of
``{name, shape, offset}`` entries (offsets in bytes from the payload start).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LATTICENET-CHECKPOINT 1\n"
DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    state: dict[str, np.ndarray]
    spec: dict | None = None
    meta: dict = field(default_factory=dict)


def encode_checkpoint(state: dict, spec: dict | None = None, meta: dict | None = None) -> bytes:
    directory = []
    chunks = []
    offset = 0
    for name, value in state.items():
        arr = np.asarray(getattr(value, "data", value), dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"tensor {name} has non-finite values")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = np.ascontiguousarray(arr).tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = {
        "dtype": "float32",
        "byte_order": "little",
        "spec": spec,
        "meta": meta or {},
        "tensors": directory,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + f"{len(head)}\n".encode("ascii") + head + b"".join(chunks)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if not data.startswith(MAGIC):
        raise CheckpointError("not a checkpoint (bad magic line)")
    rest = data[len(MAGIC) :]
    nl = rest.find(b"\n")
    if nl <= 0 or nl > 20:
        raise CheckpointError("missing header length line")
    try:
        hlen = int(rest[:nl].decode("ascii"))
    except (UnicodeDecodeError, ValueError):
        raise CheckpointError("header length is not an integer") from None
    start = nl + 1
    if hlen < 0 or start + hlen > len(rest):
        raise CheckpointError("header is truncated")
    try:
        header = json.loads(rest[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"header is not valid JSON: {exc}") from None
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), list):
        raise CheckpointError("header lacks a tensor directory")
    if header.get("dtype") != "float32" or header.get("byte_order") != "little":
        raise CheckpointError("unsupported payload encoding")
    payload = rest[start + hlen :]
    state = {}
    expected = 0
    for entry in header["tensors"]:
        try:
            name = entry["name"]
            shape = tuple(int(s) for s in entry["shape"])
            offset = int(entry["offset"])
        except (KeyError, TypeError, ValueError):
            raise CheckpointError(f"malformed directory entry {entry!r}") from None
        if not isinstance(name, str) or name in state or any(s < 0 for s in shape):
            raise CheckpointError(f"malformed directory entry {entry!r}")
        size = int(np.prod(shape, dtype=np.int64)) * DTYPE.itemsize
        if offset != expected:
            raise CheckpointError(f"tensor {name} at offset {offset}, expected {expected}")
        if offset + size > len(payload):
            raise CheckpointError(f"payload truncated inside tensor {name}")
        state[name] = np.frombuffer(payload, dtype=DTYPE, count=size // DTYPE.itemsize, offset=offset).reshape(shape).copy()
        expected += size
    if len(payload) != expected:
        raise CheckpointError(f"payload has {len(payload)} bytes, directory accounts for {expected}")
    spec = header.get("spec")
    meta = header.get("meta") or {}
    if (spec is not None and not isinstance(spec, dict)) or not isinstance(meta, dict):
        raise CheckpointError("spec and meta must be objects")
    return Checkpoint(state, spec, meta)


def save_checkpoint(path, state: dict, spec: dict | None = None, meta: dict | None = None) -> None:
    data = encode_checkpoint(state, spec, meta)
    path = Path(path)
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
