"""Binary tensor records, canonical JSON, and artifact metadata.

Two file formats share the same tensor-record encoding:

* weight files: magic ``RAMP``, u32 format version, then tensor records;
* dataset files: magic ``RMPD``, u32 format version, u32-length-prefixed
  manifest JSON, u32 environment count, length-prefixed environment JSON
  blobs, then tensor records.

A tensor record is ``u32 name length, utf-8 name, u32 rank, u32 dims...,
little-endian float64 data``.  Records are written in sorted name order
so identical contents produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import BinaryIO

import numpy as np

from ._version import __version__

WEIGHT_MAGIC = b"RAMP"
DATASET_MAGIC = b"RMPD"
FORMAT_VERSION = 1

_U32 = struct.Struct("<I")


class ArtifactError(ValueError):
    """Raised for malformed or incompatible artifact files."""


def canonical_json(obj) -> str:
    """Deterministic JSON text: sorted keys, no whitespace variance."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj) -> str:
    """Hex sha256 of the canonical JSON form of a config mapping."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def version_tuple(text: str) -> tuple[int, int, int]:
    parts = text.split(".")
    if len(parts) != 3:
        raise ArtifactError(f"bad version string: {text!r}")
    return tuple(int(p) for p in parts)  # type: ignore[return-value]


def check_tool_version(recorded: str, what: str) -> None:
    """Refuse artifacts written by a different major.minor tool version."""
    a = version_tuple(recorded)
    b = version_tuple(__version__)
    if a[:2] != b[:2]:
        raise ArtifactError(
            f"{what} was written by tool version {recorded}, "
            f"this tool is {__version__}; regenerate the artifact"
        )


def artifact_meta(seed: int, cfg_hash: str) -> dict:
    """The metadata block embedded in every JSON artifact."""
    return {"tool_version": __version__, "config_hash": cfg_hash, "seed": int(seed)}


def check_json_meta(doc: dict, what: str) -> None:
    meta = doc.get("meta")
    if not isinstance(meta, dict) or "tool_version" not in meta:
        raise ArtifactError(f"{what} carries no metadata block")
    check_tool_version(str(meta["tool_version"]), what)


def _write_u32(f: BinaryIO, value: int) -> None:
    f.write(_U32.pack(value))


def _read_u32(f: BinaryIO) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise ArtifactError("truncated file")
    return _U32.unpack(raw)[0]


def write_tensor_records(f: BinaryIO, tensors: dict[str, np.ndarray]) -> None:
    for name in sorted(tensors):
        data = np.ascontiguousarray(tensors[name], dtype="<f8")
        encoded = name.encode("utf-8")
        _write_u32(f, len(encoded))
        f.write(encoded)
        _write_u32(f, data.ndim)
        for dim in data.shape:
            _write_u32(f, dim)
        f.write(data.tobytes())


def read_tensor_records(f: BinaryIO) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    while True:
        head = f.read(4)
        if not head:
            return tensors
        if len(head) != 4:
            raise ArtifactError("truncated tensor record")
        name = f.read(_U32.unpack(head)[0]).decode("utf-8")
        rank = _read_u32(f)
        shape = tuple(_read_u32(f) for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = f.read(8 * count)
        if len(raw) != 8 * count:
            raise ArtifactError(f"truncated data for tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def hash_to_floats(hex_digest: str) -> np.ndarray:
    """Pack a sha256 hex digest into 8 exactly-representable u32 floats."""
    raw = bytes.fromhex(hex_digest)
    return np.array([v for v in struct.unpack("<8I", raw)], dtype=np.float64)


def floats_to_hash(values: np.ndarray) -> str:
    packed = struct.pack("<8I", *[int(v) for v in values])
    return packed.hex()
