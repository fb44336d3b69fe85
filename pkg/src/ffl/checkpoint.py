"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"FFLC" | u32 version | 32-byte config digest
    u32 count, then per tensor: u32 name length, name (utf-8), u32 rank,
        rank x u32 extents, float32 values          -- parameters and buffers
    same tensor block                               -- optimizer momentum
    u32 epoch | u64 step                            -- schedule position
    u32 length, JSON                                -- RNG state
    u32 length, JSON                                -- resolved config
    32-byte sha256 of everything above

The trailing hash rejects truncated or corrupted files before any state
is handed back.
"""

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"FFLC"
VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    digest: bytes
    tensors: dict
    optimizer: dict = field(default_factory=dict)
    epoch: int = 0
    step: int = 0
    rng_state: dict = field(default_factory=dict)


def _write_tensors(buf, tensors):
    buf.write(struct.pack("<I", len(tensors)))
    for name, array in tensors.items():
        array = np.ascontiguousarray(array, dtype="<f4")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", array.ndim))
        buf.write(struct.pack(f"<{array.ndim}I", *array.shape))
        buf.write(array.tobytes())


def _write_json(buf, obj):
    encoded = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(encoded)))
    buf.write(encoded)


def to_bytes(ckpt):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(ckpt.digest)
    _write_tensors(buf, ckpt.tensors)
    _write_tensors(buf, ckpt.optimizer)
    buf.write(struct.pack("<IQ", ckpt.epoch, ckpt.step))
    _write_json(buf, ckpt.rng_state)
    _write_json(buf, ckpt.config)
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"unexpected end of data at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensors(self):
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (length,) = self.unpack("<I")
            name = self.take(length).decode("utf-8")
            (rank,) = self.unpack("<I")
            shape = self.unpack(f"<{rank}I")
            n = int(np.prod(shape))
            out[name] = np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32).reshape(shape)
        return out

    def json(self):
        (length,) = self.unpack("<I")
        return json.loads(self.take(length).decode("utf-8"))


def from_bytes(data, expected_digest=None):
    if len(data) < 8 + 32 + 32 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    body, trailer = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise CheckpointError("checkpoint is truncated or corrupted (checksum mismatch)")

    reader = _Reader(body)
    reader.take(8)
    digest = reader.take(32)
    if expected_digest is not None and digest != expected_digest:
        raise CheckpointError("config digest mismatch: checkpoint was written under a different config")
    tensors = reader.tensors()
    optimizer = reader.tensors()
    epoch, step = reader.unpack("<IQ")
    rng_state = reader.json()
    config = reader.json()
    if reader.pos != len(body):
        raise CheckpointError(f"{len(body) - reader.pos} trailing bytes after checkpoint payload")
    return Checkpoint(config, digest, tensors, optimizer, epoch, step, rng_state)


def save_checkpoint(ckpt, path):
    """Write atomically: a temp file is renamed over ``path`` once complete."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path, expected_digest=None):
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return from_bytes(data, expected_digest)
