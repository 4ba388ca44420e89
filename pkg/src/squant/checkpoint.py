"""Binary model checkpoints.

Layout: 4 magic bytes, uint32 LE format version, uint32 LE header length,
UTF-8 JSON header (config echo, named tensor index, calibration state),
then concatenated C-order little-endian float32 tensor payloads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"SQCK"
VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or version-incompatible checkpoint file."""


@dataclass
class Checkpoint:
    config: dict
    params: dict
    calibration: dict | None = None
    version: int = VERSION
    extra: dict = field(default_factory=dict)


def _tensor_index(params: dict) -> list:
    index = []
    offset = 0
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=np.float32)
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    return index


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    index = _tensor_index(ckpt.params)
    header = {
        "config": ckpt.config,
        "tensors": index,
        "calibration": ckpt.calibration,
        "extra": ckpt.extra,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(VERSION).astype("<u4").tobytes())
        f.write(np.uint32(len(blob)).astype("<u4").tobytes())
        f.write(blob)
        for entry in index:
            arr = np.asarray(ckpt.params[entry["name"]], dtype=np.float32)
            f.write(np.ascontiguousarray(arr).astype("<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    hlen = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
    body = 12 + hlen
    if len(raw) < body:
        raise CheckpointError("truncated header")
    try:
        header = json.loads(raw[12:body].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable header: {e}") from e
    params = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = body + entry["offset"]
        end = start + count * 4
        if len(raw) < end:
            raise CheckpointError(f"truncated payload for tensor {entry['name']!r}")
        flat = np.frombuffer(raw[start:end], dtype="<f4").astype(np.float32)
        params[entry["name"]] = flat.reshape(shape)
    return Checkpoint(
        config=header["config"],
        params=params,
        calibration=header.get("calibration"),
        version=version,
        extra=header.get("extra", {}),
    )
