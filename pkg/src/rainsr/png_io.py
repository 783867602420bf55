"""Minimal PNG reader/writer for the dataset contract: 8-bit RGB, no alpha,
no interlacing.

Writing always emits filter type 0 rows with a fixed zlib level, so the
bytes produced for a given array are identical across runs and platforms.
Reading handles any of the five standard row filters but rejects images
that are not plain 8-bit RGB; callers treat that rejection as
"undecodable" rather than guessing at a conversion.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import IngestError

_SIGNATURE = b"\x89PNG\r\n\x1a\n"


def _chunk(tag: bytes, payload: bytes) -> bytes:
    return (
        struct.pack(">I", len(payload))
        + tag
        + payload
        + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF)
    )


def encode_png(img: np.ndarray) -> bytes:
    """Encode an (H, W, 3) float [0,1] or uint8 array as PNG bytes."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3), got {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[0], arr.shape[1]
    raw = bytearray()
    for row in arr:
        raw.append(0)  # filter type 0
        raw.extend(row.tobytes())
    ihdr = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return (
        _SIGNATURE
        + _chunk(b"IHDR", ihdr)
        + _chunk(b"IDAT", zlib.compress(bytes(raw), 6))
        + _chunk(b"IEND", b"")
    )


def write_png(path, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_png(img))


def _unfilter(data: bytes, h: int, w: int) -> np.ndarray:
    stride = w * 3
    out = np.zeros((h, stride), dtype=np.uint8)
    pos = 0
    prev = np.zeros(stride, dtype=np.uint8)
    for y in range(h):
        ftype = data[pos]
        pos += 1
        row = np.frombuffer(data, dtype=np.uint8, count=stride, offset=pos).copy()
        pos += stride
        if ftype == 0:
            pass
        elif ftype == 1:  # Sub
            for x in range(3, stride):
                row[x] = (int(row[x]) + int(row[x - 3])) & 0xFF
        elif ftype == 2:  # Up
            row = (row.astype(np.int32) + prev).astype(np.uint8)
        elif ftype == 3:  # Average
            for x in range(stride):
                left = int(row[x - 3]) if x >= 3 else 0
                row[x] = (int(row[x]) + (left + int(prev[x])) // 2) & 0xFF
        elif ftype == 4:  # Paeth
            for x in range(stride):
                a = int(row[x - 3]) if x >= 3 else 0
                b = int(prev[x])
                c = int(prev[x - 3]) if x >= 3 else 0
                p = a + b - c
                pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
                if pa <= pb and pa <= pc:
                    pred = a
                elif pb <= pc:
                    pred = b
                else:
                    pred = c
                row[x] = (int(row[x]) + pred) & 0xFF
        else:
            raise IngestError(f"unsupported PNG row filter {ftype}")
        out[y] = row
        prev = row
    return out.reshape(h, w, 3)


def decode_png(blob: bytes) -> np.ndarray:
    """Decode PNG bytes to an (H, W, 3) uint8 array.

    Raises IngestError for anything that is not a well-formed, non-interlaced
    8-bit RGB PNG.
    """
    if blob[:8] != _SIGNATURE:
        raise IngestError("not a PNG file")
    pos = 8
    width = height = None
    idat = bytearray()
    while pos + 8 <= len(blob):
        (length,) = struct.unpack(">I", blob[pos : pos + 4])
        tag = blob[pos + 4 : pos + 8]
        payload = blob[pos + 8 : pos + 8 + length]
        if len(payload) != length:
            raise IngestError("truncated PNG chunk")
        if tag == b"IHDR":
            width, height, depth, ctype, _, _, interlace = struct.unpack(
                ">IIBBBBB", payload
            )
            if depth != 8 or ctype != 2 or interlace != 0:
                raise IngestError(
                    f"unsupported PNG (depth={depth} colour={ctype} "
                    f"interlace={interlace}); need 8-bit RGB non-interlaced"
                )
        elif tag == b"IDAT":
            idat.extend(payload)
        elif tag == b"IEND":
            break
        pos += 12 + length
    if width is None or not idat:
        raise IngestError("PNG missing IHDR or IDAT")
    try:
        raw = zlib.decompress(bytes(idat))
    except zlib.error as exc:
        raise IngestError(f"corrupt PNG stream: {exc}") from None
    expected = height * (width * 3 + 1)
    if len(raw) != expected:
        raise IngestError("PNG pixel data has wrong length")
    return _unfilter(raw, height, width)


def read_png(path) -> np.ndarray:
    """Read a PNG file into an (H, W, 3) float64 image in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    return decode_png(blob).astype(np.float64) / 255.0


def quantize(img: np.ndarray) -> np.ndarray:
    """Round-trip an image through 8-bit quantisation (round(255 v) / 255)."""
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255) / 255.0
