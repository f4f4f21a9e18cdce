"""Parameter checkpoint format.

Layout (all integers little-endian)::

    b"FMCK"            magic
    uint32             format version (1)
    uint64             manifest length in bytes
    manifest           UTF-8 JSON, sorted keys, no whitespace
    payload            float64 little-endian, tensors in manifest order

The manifest holds the ordered parameter list (name, shape, private flag,
byte offset into the payload), the model config, and free-form metadata.
Writing the same parameters twice gives identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"FMCK"
VERSION = 1
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    private: set[str] = field(default_factory=set)
    config: dict[str, Any] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)


def dumps(
    params: Mapping[str, np.ndarray],
    private: set[str] | frozenset[str] = frozenset(),
    config: Mapping[str, Any] | None = None,
    meta: Mapping[str, Any] | None = None,
) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name, value in params.items():
        arr = np.asarray(value, dtype=_DTYPE, order="C")
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"parameter {name!r} holds non-finite values")
        raw = arr.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "private": name in private, "offset": offset}
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": VERSION,
        "parameters": entries,
        "config": dict(config or {}),
        "meta": dict(meta or {}),
        "payload_bytes": offset,
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header = MAGIC + struct.pack("<IQ", VERSION, len(blob))
    return header + blob + b"".join(chunks)


def loads(data: bytes) -> Checkpoint:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError("not a parameter checkpoint (bad magic)")
    version, mlen = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        manifest = json.loads(data[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from exc
    payload = memoryview(data)[16 + mlen :]
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(
            f"payload holds {len(payload)} bytes, manifest expects {manifest['payload_bytes']}"
        )
    params, private = {}, set()
    for entry in manifest["parameters"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload[start : start + count * 8], dtype=_DTYPE).reshape(shape)
        params[entry["name"]] = arr.astype(np.float64)
        if entry["private"]:
            private.add(entry["name"])
    return Checkpoint(params, private, manifest["config"], manifest["meta"])


def save(path: str | Path, params, private=frozenset(), config=None, meta=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps(params, private, config, meta))
    return path


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return loads(data)


def check_schema(params: Mapping[str, np.ndarray], expected: list[tuple[str, tuple[int, ...]]]) -> None:
    """Raise naming the first parameter whose name or shape diverges."""
    got = [(k, tuple(v.shape)) for k, v in params.items()]
    for i, want in enumerate(expected):
        if i >= len(got):
            raise CheckpointError(f"missing parameter {want[0]!r}")
        if got[i][0] != want[0]:
            raise CheckpointError(f"parameter {i} is {got[i][0]!r}, expected {want[0]!r}")
        if got[i][1] != tuple(want[1]):
            raise CheckpointError(
                f"parameter {want[0]!r} has shape {got[i][1]}, expected {tuple(want[1])}"
            )
    if len(got) > len(expected):
        raise CheckpointError(f"unexpected parameter {got[len(expected)][0]!r}")
