"""Versioned little-endian checkpoint container with a CRC32 trailer.

Layout::

    b"SVCK"                      magic
    u32                          format version
    u64 + bytes                  UTF-8 JSON metadata
    u64                          tensor count
    per tensor:
        u16 + bytes              UTF-8 name
        u8                       dtype code (0 = f32, 1 = f64)
        u8                       rank
        u64 * rank               dims
        raw values               little-endian, row-major
    u32                          CRC32 of everything after the magic
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, CheckpointVersionError

MAGIC = b"SVCK"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class Checkpoint:
    metadata: dict = field(default_factory=dict)
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    @classmethod
    def from_model(cls, model, metadata: dict | None = None) -> "Checkpoint":
        tensors = OrderedDict((name, np.array(arr, copy=True)) for name, arr in model.state_dict().items())
        return cls(dict(metadata or {}), tensors)

    def to_bytes(self) -> bytes:
        body = bytearray()
        body += struct.pack("<I", FORMAT_VERSION)
        meta = json.dumps(self.metadata, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
        body += struct.pack("<Q", len(meta)) + meta
        body += struct.pack("<Q", len(self.tensors))
        for name, arr in self.tensors.items():
            arr = np.asarray(arr)
            if arr.dtype not in _CODES:
                raise CheckpointError(f"tensor {name} has unsupported dtype {arr.dtype}")
            encoded = name.encode("utf-8")
            if len(encoded) > 0xFFFF or arr.ndim > 0xFF:
                raise CheckpointError(f"tensor {name} cannot be encoded (name or rank too long)")
            body += struct.pack("<H", len(encoded)) + encoded
            body += struct.pack("<BB", _CODES[arr.dtype], arr.ndim)
            body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
            body += np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        return MAGIC + bytes(body) + struct.pack("<I", zlib.crc32(body))

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < 8 or blob[:4] != MAGIC:
            raise CheckpointError(f"not a checkpoint file: bad magic {blob[:4]!r}", offset=0)
        version = struct.unpack_from("<I", blob, 4)[0]
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})", offset=4)
        if len(blob) < 12:
            raise CheckpointError("checkpoint truncated", offset=len(blob))
        stored = struct.unpack_from("<I", blob, len(blob) - 4)[0]
        if zlib.crc32(blob[4:-4]) != stored:
            raise CheckpointError("checkpoint integrity check failed: CRC32 mismatch", offset=len(blob) - 4)

        reader = _Reader(blob, 8, len(blob) - 4)
        meta_len = reader.unpack("<Q")[0]
        try:
            metadata = json.loads(reader.take(meta_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"metadata is not valid UTF-8 JSON: {exc}", offset=16) from exc
        tensors = OrderedDict()
        for _ in range(reader.unpack("<Q")[0]):
            name = reader.take(reader.unpack("<H")[0]).decode("utf-8")
            code, rank = reader.unpack("<BB")
            if code not in _DTYPES:
                raise CheckpointError(f"tensor {name} has unknown dtype code {code}", offset=reader.pos - 2)
            shape = reader.unpack(f"<{rank}Q")
            dtype = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            tensors[name] = np.frombuffer(reader.take(nbytes), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        if reader.pos != reader.end:
            raise CheckpointError("trailing bytes after tensor table", offset=reader.pos)
        return cls(metadata, tensors)


class _Reader:
    def __init__(self, blob: bytes, pos: int, end: int):
        self.blob, self.pos, self.end = blob, pos, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise CheckpointError(f"checkpoint truncated: need {n} bytes", offset=self.pos)
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def save_checkpoint(source, metadata: dict | None, path) -> Checkpoint:
    """Write a model (or an existing Checkpoint) to ``path`` atomically."""
    ckpt = source if isinstance(source, Checkpoint) else Checkpoint.from_model(source, metadata)
    if isinstance(source, Checkpoint) and metadata is not None:
        ckpt = Checkpoint(dict(metadata), source.tensors)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(ckpt.to_bytes())
    os.replace(tmp, path)
    return ckpt


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return Checkpoint.from_bytes(blob)
