"""Binary containers: DPKF feature archives and DPKC parameter checkpoints.

DPKF layout (all integers little-endian)::

    b"DPKF" | u16 version | u32 tensor count
    per tensor: u16 name length | utf-8 name | u8 dtype (0=f32, 1=f64)
                | u8 rank | rank x u64 dims | raw little-endian payload

DPKC layout::

    b"DPKC" | u16 version | u64 seed | 32-byte config sha256
    | u32 metadata length | utf-8 JSON metadata | u32 tensor count
    per tensor: u16 name length | utf-8 name | u8 rank | rank x u64 dims
                | float32 little-endian payload
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

ARCHIVE_MAGIC = b"DPKF"
ARCHIVE_VERSION = 1
CHECKPOINT_MAGIC = b"DPKC"
CHECKPOINT_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class ArchiveError(ValueError):
    """Malformed, truncated or unsupported file."""


class _Reader:
    def __init__(self, data: bytes, path):
        self.buf = memoryview(data)
        self.pos = 0
        self.path = path

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise ArchiveError(f"{self.path}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def name(self) -> str:
        (length,) = self.unpack("<H")
        return bytes(self.take(length)).decode("utf-8")

    def dims(self) -> tuple[int, ...]:
        (rank,) = self.unpack("<B")
        return self.unpack(f"<{rank}Q") if rank else ()


def _write_name(fh, name: str) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _write_dims(fh, shape) -> None:
    fh.write(struct.pack("<B", len(shape)))
    if shape:
        fh.write(struct.pack(f"<{len(shape)}Q", *shape))


def write_archive(path, tensors: dict) -> None:
    """Write named float32/float64 arrays; other float dtypes are rejected."""
    buf = io.BytesIO()
    buf.write(ARCHIVE_MAGIC)
    buf.write(struct.pack("<HI", ARCHIVE_VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _TAGS:
            raise ArchiveError(f"tensor {name!r}: dtype {arr.dtype} not supported (f32/f64 only)")
        tag = _TAGS[arr.dtype]
        _write_name(buf, name)
        buf.write(struct.pack("<B", tag))
        _write_dims(buf, arr.shape)
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_archive(path) -> dict[str, np.ndarray]:
    r = _Reader(Path(path).read_bytes(), path)
    if bytes(r.take(4)) != ARCHIVE_MAGIC:
        raise ArchiveError(f"{path}: not a DPKF feature archive")
    version, count = r.unpack("<HI")
    if version != ARCHIVE_VERSION:
        raise ArchiveError(f"{path}: unsupported archive version {version}")
    out = {}
    for _ in range(count):
        name = r.name()
        (tag,) = r.unpack("<B")
        if tag not in _DTYPES:
            raise ArchiveError(f"{path}: tensor {name!r} has unknown dtype tag {tag}")
        dims = r.dims()
        dtype = _DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        out[name] = np.frombuffer(r.take(nbytes), dtype=dtype).reshape(dims).copy()
    if r.pos != len(r.buf):
        raise ArchiveError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    return out


def save_checkpoint(path, state_dict: dict, *, seed: int, config_digest: bytes, metadata: dict | None = None) -> None:
    if len(config_digest) != 32:
        raise ValueError("config digest must be 32 bytes (sha256)")
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HQ", CHECKPOINT_VERSION, seed & (2**64 - 1)))
    buf.write(config_digest)
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(state_dict)))
    for name, t in state_dict.items():
        arr = t.detach().cpu().numpy() if hasattr(t, "detach") else np.asarray(t)
        _write_name(buf, name)
        _write_dims(buf, arr.shape)
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Returns ``(header, arrays)``; header has seed, config_digest, metadata."""
    r = _Reader(Path(path).read_bytes(), path)
    if bytes(r.take(4)) != CHECKPOINT_MAGIC:
        raise ArchiveError(f"{path}: not a DPKC checkpoint")
    version, seed = r.unpack("<HQ")
    if version != CHECKPOINT_VERSION:
        raise ArchiveError(f"{path}: unsupported checkpoint version {version}")
    digest = bytes(r.take(32))
    (meta_len,) = r.unpack("<I")
    metadata = json.loads(bytes(r.take(meta_len)).decode("utf-8"))
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        name = r.name()
        dims = r.dims()
        n = int(np.prod(dims, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).copy()
    if r.pos != len(r.buf):
        raise ArchiveError(f"{path}: {len(r.buf) - r.pos} trailing bytes")
    header = {"version": version, "seed": seed, "config_digest": digest, "metadata": metadata}
    return header, arrays
