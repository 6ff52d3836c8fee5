"""Versioned little-endian binary files for model parameters.

Layout::

    magic         8 bytes  b"VQAUGPRM"
    version       u32
    kind          u16 length + utf-8
    size fields   u32 count, then (u16 length + utf-8 name, i64 value) each
    schema hash   32 bytes (sha-256 digest, zeros when absent)
    meta          u32 length + utf-8 JSON
    parameters    u64 count + float64 values
    blocks        u32 count, then (u16 length + utf-8 name, u64 count + float64 values) each
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"VQAUGPRM"
VERSION = 1


class ModelFileError(ValueError):
    pass


@dataclass
class ModelFile:
    kind: str
    sizes: dict[str, int]
    parameters: np.ndarray
    schema_hash: str = ""
    meta: dict = field(default_factory=dict)
    blocks: dict[str, np.ndarray] = field(default_factory=dict)


def _put_str(buf, s: str, fmt: str = "<H") -> None:
    raw = s.encode("utf-8")
    buf.write(struct.pack(fmt, len(raw)))
    buf.write(raw)


def _get_str(buf, fmt: str = "<H") -> str:
    (n,) = struct.unpack(fmt, _read(buf, struct.calcsize(fmt)))
    return _read(buf, n).decode("utf-8")


def _read(buf, n: int) -> bytes:
    raw = buf.read(n)
    if len(raw) != n:
        raise ModelFileError("truncated model file")
    return raw


def _put_array(buf, a: np.ndarray) -> None:
    a = np.ascontiguousarray(a, dtype="<f8").reshape(-1)
    buf.write(struct.pack("<Q", a.size))
    buf.write(a.tobytes())


def _get_array(buf) -> np.ndarray:
    (n,) = struct.unpack("<Q", _read(buf, 8))
    return np.frombuffer(_read(buf, 8 * n), dtype="<f8").astype(np.float64)


def to_bytes(mf: ModelFile) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _put_str(buf, mf.kind)
    buf.write(struct.pack("<I", len(mf.sizes)))
    for name in sorted(mf.sizes):
        _put_str(buf, name)
        buf.write(struct.pack("<q", int(mf.sizes[name])))
    digest = bytes.fromhex(mf.schema_hash) if mf.schema_hash else bytes(32)
    if len(digest) != 32:
        raise ModelFileError("schema hash must be a sha-256 hex digest")
    buf.write(digest)
    _put_str(buf, json.dumps(mf.meta, sort_keys=True), "<I")
    _put_array(buf, mf.parameters)
    buf.write(struct.pack("<I", len(mf.blocks)))
    for name in sorted(mf.blocks):
        _put_str(buf, name)
        _put_array(buf, mf.blocks[name])
    return buf.getvalue()


def from_bytes(raw: bytes) -> ModelFile:
    buf = io.BytesIO(raw)
    if _read(buf, 8) != MAGIC:
        raise ModelFileError("not a model file (bad magic)")
    (version,) = struct.unpack("<I", _read(buf, 4))
    if version != VERSION:
        raise ModelFileError(f"unsupported model file version {version}")
    kind = _get_str(buf)
    (n_sizes,) = struct.unpack("<I", _read(buf, 4))
    sizes = {}
    for _ in range(n_sizes):
        name = _get_str(buf)
        (sizes[name],) = struct.unpack("<q", _read(buf, 8))
    digest = _read(buf, 32)
    schema_hash = "" if digest == bytes(32) else digest.hex()
    meta = json.loads(_get_str(buf, "<I"))
    parameters = _get_array(buf)
    (n_blocks,) = struct.unpack("<I", _read(buf, 4))
    blocks = {}
    for _ in range(n_blocks):
        name = _get_str(buf)
        blocks[name] = _get_array(buf)
    if buf.read(1):
        raise ModelFileError("trailing bytes after model file")
    return ModelFile(kind, sizes, parameters, schema_hash, meta, blocks)


def save(path: str | Path, mf: ModelFile) -> None:
    Path(path).write_bytes(to_bytes(mf))


def load(path: str | Path, kind: str | None = None) -> ModelFile:
    mf = from_bytes(Path(path).read_bytes())
    if kind is not None and mf.kind != kind:
        raise ModelFileError(f"{path}: expected a {kind!r} model, found {mf.kind!r}")
    return mf


def checksum(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
