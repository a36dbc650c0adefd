"""Versioned binary container for named tensors.

Layout (little-endian)::

    b"ETCP" | u32 version | u32 n + n bytes UTF-8 JSON (config + metadata)
    | u32 section count
    | per section: u32 n + name | u8 dtype tag (1 = f32) | u32 rank | u32 dims[rank] | payload
    | u32 n + n bytes UTF-8 JSON rng state
    | u32 CRC-32 of everything above
"""
from __future__ import annotations

import io
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ETCP"
FORMAT_VERSION = 1
DTYPE_TAGS = {1: np.dtype("<f4")}


class CheckpointError(ValueError):
    pass


class VersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under ``prefix.`` with the prefix stripped."""
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}

    def has_section(self, prefix: str) -> bool:
        return any(k.startswith(prefix + ".") for k in self.tensors)

    def without(self, prefix: str) -> "Checkpoint":
        kept = {k: v for k, v in self.tensors.items() if not k.startswith(prefix + ".")}
        return Checkpoint(self.config, kept, self.rng_state, self.format_version)


def _blob(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.format_version))
    buf.write(_blob(json.dumps(ckpt.config, sort_keys=True).encode("utf-8")))
    buf.write(struct.pack("<I", len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f4", order="C")
        buf.write(_blob(name.encode("utf-8")))
        buf.write(struct.pack("<BI", 1, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    buf.write(_blob(json.dumps(ckpt.rng_state, sort_keys=True).encode("utf-8")))
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def blob(self) -> bytes:
        return self.take(self.u32())


def decode_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    if len(data) < 12:
        raise CheckpointError("truncated checkpoint")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc:
        raise CheckpointError("checksum mismatch: corrupt or truncated checkpoint")
    r.data = data[:-4]
    try:
        config = json.loads(r.blob().decode("utf-8"))
        tensors = {}
        for _ in range(r.u32()):
            name = r.blob().decode("utf-8")
            tag, rank = struct.unpack("<BI", r.take(5))
            if tag not in DTYPE_TAGS:
                raise CheckpointError(f"section {name!r}: unknown dtype tag {tag}")
            dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
            n = int(np.prod(dims, dtype=np.int64)) * DTYPE_TAGS[tag].itemsize
            tensors[name] = np.frombuffer(r.take(n), dtype=DTYPE_TAGS[tag]).reshape(dims).astype(np.float32)
        rng_state = json.loads(r.blob().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError, struct.error) as e:
        raise CheckpointError(f"corrupt section: {e}") from e
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after rng-state section")
    return Checkpoint(config, tensors, rng_state, version)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
