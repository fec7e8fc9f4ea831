"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"IMTG"  u32 version
    u32 len  config digest (ascii)
    u64 step
    u32 len  JSON metadata (seed state, config, anything serializable)
    u32 n    tensor records: u16 len name, u8 len dtype, u8 ndim, u64 dims..., u64 nbytes, raw
    u8 flag  optimizer moments present
             [u64 adam step, u32 n, tensor records for "m/<name>" and "v/<name>"]
    32 bytes sha256 of everything above

Files are written to a temp name and renamed, so a reader never sees a
partial write from this process. Truncated or corrupted files fail to load.
"""
from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import BadMagic, CheckpointError, DigestMismatch, VersionMismatch

MAGIC = b"IMTG"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    digest: str
    step: int = 0
    meta: dict = field(default_factory=dict)
    opt_step: int | None = None
    moments: dict[str, np.ndarray] | None = None  # keys "m/<name>", "v/<name>"


def _write_tensors(buf, tensors: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], order="C")  # ascontiguousarray would promote 0-d to 1-d
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        nb, db = name.encode("utf-8"), arr.dtype.str.encode("ascii")
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack("<B", len(db)) + db)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        raw = arr.tobytes()
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)


def encode(ck: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<I", VERSION))
    d = ck.digest.encode("ascii")
    buf.write(struct.pack("<I", len(d)) + d)
    buf.write(struct.pack("<Q", ck.step))
    meta = json.dumps(ck.meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)) + meta)
    _write_tensors(buf, ck.tensors)
    if ck.moments is None:
        buf.write(b"\x00")
    else:
        buf.write(b"\x01" + struct.pack("<Q", ck.opt_step or 0))
        _write_tensors(buf, ck.moments)
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path, ck: Checkpoint) -> None:
    path = Path(path)
    data = encode(ck)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensors(self) -> dict[str, np.ndarray]:
        (n,) = self.unpack("<I")
        out = {}
        for _ in range(n):
            (ln,) = self.unpack("<H")
            name = self.take(ln).decode("utf-8")
            (ld,) = self.unpack("<B")
            dtype = np.dtype(self.take(ld).decode("ascii"))
            (ndim,) = self.unpack("<B")
            shape = self.unpack(f"<{ndim}Q")
            (nbytes,) = self.unpack("<Q")
            if nbytes != dtype.itemsize * int(np.prod(shape, dtype=np.int64)):
                raise CheckpointError(f"tensor {name}: size does not match shape")
            arr = np.frombuffer(self.take(nbytes), dtype=dtype).reshape(shape)
            out[name] = arr.astype(dtype.newbyteorder("="), copy=True)
        return out


def decode(data: bytes, expected_digest: str | None = None) -> Checkpoint:
    if data[:4] != MAGIC:
        raise BadMagic("not a checkpoint file")
    if len(data) < 8 + 32:
        raise CheckpointError("checkpoint is truncated")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise VersionMismatch(f"format version {version}, expected {VERSION}")
    body, tail = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != tail:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupted)")
    r = _Reader(body)
    r.take(8)
    (ld,) = r.unpack("<I")
    digest = r.take(ld).decode("ascii")
    if expected_digest is not None and digest != expected_digest:
        raise DigestMismatch(f"checkpoint built for config {digest[:12]}, expected {expected_digest[:12]}")
    (step,) = r.unpack("<Q")
    (lm,) = r.unpack("<I")
    meta = json.loads(r.take(lm).decode("utf-8"))
    tensors = r.tensors()
    (flag,) = r.unpack("<B")
    opt_step, moments = None, None
    if flag:
        (opt_step,) = r.unpack("<Q")
        moments = r.tensors()
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after checkpoint body")
    return Checkpoint(tensors, digest, step, meta, opt_step, moments)


def load_checkpoint(path, expected_digest: str | None = None) -> Checkpoint:
    with open(path, "rb") as f:
        return decode(f.read(), expected_digest)
