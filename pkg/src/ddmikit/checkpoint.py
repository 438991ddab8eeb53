"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"DDMIKIT1"                       magic
    u32 version
    u32 n, n bytes                    UTF-8 TOML config
    u32 n, n bytes                    UTF-8 JSON: step counters, RNG state, extras
    u32 count                         tensor table entries, each:
        u16 n, n bytes                UTF-8 name
        u8 dtype code, u8 ndim, ndim x u64 extents
        raw little-endian values, row-major
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DDMIKIT1"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
CODES = {v: k for k, v in DTYPES.items()}


class CheckpointError(RuntimeError):
    """Unreadable, truncated or incompatible checkpoint."""


@dataclass
class Checkpoint:
    tensors: dict
    config: str = ""
    meta: dict = field(default_factory=dict)

    def subset(self, prefix: str) -> dict:
        """Tensors under ``prefix`` with the prefix stripped."""
        n = len(prefix)
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)


def _encode_tensor(name: str, arr) -> bytes:
    arr = np.asarray(arr)
    code = CODES.get(arr.dtype.newbyteorder("<"))
    if code is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name}")
    raw_name = name.encode("utf-8")
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def dumps(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for blob in (ckpt.config.encode("utf-8"), json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")):
        parts += [struct.pack("<I", len(blob)), blob]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    parts += [_encode_tensor(k, v) for k, v in ckpt.tensors.items()]
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = memoryview(buf), 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes) -> Checkpoint:
    rd = _Reader(buf)
    if bytes(rd.take(len(MAGIC))) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = rd.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = rd.unpack("<I")
    config = bytes(rd.take(n)).decode("utf-8")
    (n,) = rd.unpack("<I")
    meta = json.loads(bytes(rd.take(n)).decode("utf-8"))
    (count,) = rd.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n,) = rd.unpack("<H")
        name = bytes(rd.take(n)).decode("utf-8")
        code, ndim = rd.unpack("<BB")
        if code not in DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for tensor {name}")
        shape = rd.unpack(f"<{ndim}Q")
        dt = DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name}")
        tensors[name] = np.frombuffer(rd.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if rd.pos != len(rd.buf):
        raise CheckpointError("trailing bytes after tensor table")
    return Checkpoint(tensors, config, meta)


def save(path, ckpt: Checkpoint):
    """Write atomically: a temp file in the target directory is renamed over ``path``."""
    data = dumps(ckpt)
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=folder)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return loads(buf)


def tensor_digest(tensors: dict) -> str:
    """Content hash over names, dtypes, shapes and bytes, for frozen-weight checks."""
    import hashlib

    h = hashlib.sha256()
    for k in sorted(tensors):
        a = np.ascontiguousarray(tensors[k])
        h.update(k.encode())
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


__all__ = [
    "MAGIC",
    "VERSION",
    "Checkpoint",
    "CheckpointError",
    "dumps",
    "load",
    "loads",
    "restore_rng",
    "rng_state",
    "save",
    "tensor_digest",
]
