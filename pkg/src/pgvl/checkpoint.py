"""Self-describing checkpoints.

Layout: one line of JSON (the header) terminated by ``\\n``, then the raw
little-endian bytes of every array in manifest order.  The header lists
each array's name, shape, dtype, byte offset and byte length, a snapshot of
the run configuration and a SHA-256 digest of the payload.
"""
from __future__ import annotations

import hashlib
import json

import numpy as np

from .engine import Array, Parameter, ParamStore

FORMAT_VERSION = 1

_DTYPE_CODES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_CODE_OF = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class CheckpointError(ValueError):
    pass


def encode_checkpoint(params: ParamStore, config: dict | None = None) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for p in params.parameters():
        arr = p.value.data
        code = _CODE_OF[arr.dtype]
        raw = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
        manifest.append({"name": p.name, "shape": list(arr.shape), "dtype": code, "offset": offset,
                         "length": len(raw), "init": p.init_scheme})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {"format_version": FORMAT_VERSION, "arrays": manifest, "config": config,
              "payload_bytes": len(payload), "sha256": hashlib.sha256(payload).hexdigest()}
    line = json.dumps(header, sort_keys=True, separators=(",", ":"))
    return line.encode("utf-8") + b"\n" + payload


def decode_checkpoint(blob: bytes) -> tuple[ParamStore, dict | None]:
    newline = blob.find(b"\n")
    if newline < 0:
        raise CheckpointError("missing header terminator")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {header.get('format_version')!r}")
    payload = blob[newline + 1:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"payload holds {len(payload)} bytes, header declares {header['payload_bytes']}")
    store = ParamStore()
    expected = 0
    for entry in header["arrays"]:
        dtype = _DTYPE_CODES.get(entry["dtype"])
        if dtype is None:
            raise CheckpointError(f"{entry['name']}: unknown dtype {entry['dtype']!r}")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["offset"] != expected or entry["length"] != count * dtype.itemsize:
            raise CheckpointError(f"{entry['name']}: manifest offset/length inconsistent with shape")
        expected += entry["length"]
        data = np.frombuffer(payload, dtype=dtype, count=count, offset=entry["offset"])
        arr = data.reshape(entry["shape"]).astype(dtype.newbyteorder("="))
        store.add(Parameter(entry["name"], Array(arr, requires_grad=True, name=entry["name"]),
                            entry.get("init", "scaled-normal")))
    if expected != len(payload):
        raise CheckpointError("manifest does not cover the payload")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError("payload digest mismatch")
    return store, header.get("config")


def save_checkpoint(path, params: ParamStore, config: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(params, config))


def load_checkpoint(path) -> tuple[ParamStore, dict | None]:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
