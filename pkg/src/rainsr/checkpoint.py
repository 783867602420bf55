"""Bit-exact checkpoint container.

Single binary file, explicit little-endian layout::

    magic  b"RSRCKP01"
    u32    format version (1)
    str    stage tag                 (str = u16 length + utf-8 bytes)
    str    config fingerprint
    u64    step counter
    u64    seed
    u32    section count
    per section:
        str  name
        u32  meta count,   meta: (str key, str value)
        u32  tensor count, tensor: str name, u8 dtype, u8 ndim,
                                   u32 dims..., raw little-endian data

dtype codes: 0 = float32, 1 = float64, 2 = int64.  Saving is atomic
(temp file + rename), loading validates magic/version/structure, and
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError

MAGIC = b"RSRCKP01"
FORMAT_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


@dataclass
class Section:
    meta: dict[str, str] = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class CheckpointData:
    stage: str
    fingerprint: str
    step: int
    seed: int
    sections: dict[str, Section] = field(default_factory=dict)


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise CheckpointError("string too long for checkpoint format")
    return struct.pack("<H", len(raw)) + raw


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    code = _CODES.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise CheckpointError(f"unsupported tensor dtype {arr.dtype} for {name}")
    head = _pack_str(name) + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    return head + arr.astype(_DTYPES[code], copy=False).tobytes()


def serialize(data: CheckpointData) -> bytes:
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    out += _pack_str(data.stage)
    out += _pack_str(data.fingerprint)
    out += struct.pack("<QQ", data.step, data.seed)
    out += struct.pack("<I", len(data.sections))
    for name, sec in data.sections.items():
        out += _pack_str(name)
        out += struct.pack("<I", len(sec.meta))
        for k, v in sec.meta.items():
            out += _pack_str(k) + _pack_str(v)
        out += struct.pack("<I", len(sec.tensors))
        for tname, arr in sec.tensors.items():
            out += _pack_tensor(tname, arr)
    return bytes(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u16()).decode("utf-8")


def deserialize(blob: bytes) -> CheckpointData:
    r = _Reader(blob)
    if r.take(8) != MAGIC:
        raise CheckpointError("not a rainsr checkpoint (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} unsupported "
            f"(expected {FORMAT_VERSION})"
        )
    data = CheckpointData(stage=r.string(), fingerprint=r.string(),
                          step=r.u64(), seed=r.u64())
    for _ in range(r.u32()):
        name = r.string()
        sec = Section()
        for _ in range(r.u32()):
            k = r.string()
            sec.meta[k] = r.string()
        for _ in range(r.u32()):
            tname = r.string()
            code, ndim = struct.unpack("<BB", r.take(2))
            if code not in _DTYPES:
                raise CheckpointError(f"unknown dtype code {code}")
            shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim)) if ndim else ()
            dt = _DTYPES[code]
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(r.take(count * dt.itemsize), dtype=dt)
            sec.tensors[tname] = arr.reshape(shape).copy()
        data.sections[name] = sec
    if r.pos != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return data


def save_checkpoint(path: str, data: CheckpointData) -> None:
    """Serialize and write atomically: temp file in the same dir + rename."""
    blob = serialize(data)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def load_checkpoint(path: str) -> CheckpointData:
    if not os.path.isfile(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        return deserialize(fh.read())
