"""Minimal PGM (portable graymap) reader and writer, 8- and 16-bit."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PGMError(ValueError):
    pass


def _tokens(data: bytes, count: int, pos: int):
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PGMError("truncated PGM header")
        out.append(data[start:pos])
    return out, pos


def decode_pgm(data: bytes) -> np.ndarray:
    """Decode binary (P5) or ASCII (P2) PGM into a uint8/uint16 array."""
    (magic, w, h, maxval), pos = _tokens(data, 4, 0)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise PGMError("non-numeric PGM header field") from None
    if not 0 < maxval < 65536:
        raise PGMError(f"invalid maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    if magic == b"P5":
        pos += 1  # single whitespace byte after maxval
        n = w * h * dtype.itemsize
        if len(data) < pos + n:
            raise PGMError("truncated PGM raster")
        arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos)
    elif magic == b"P2":
        vals, _ = _tokens(data, w * h, pos)
        arr = np.array([int(v) for v in vals], dtype=dtype)
    else:
        raise PGMError(f"not a PGM file (magic {magic!r})")
    return arr.reshape(h, w).astype(np.uint16 if maxval > 255 else np.uint8)


def encode_pgm(img: np.ndarray, maxval: int | None = None) -> bytes:
    img = np.asarray(img)
    if img.ndim != 2:
        raise PGMError(f"PGM holds 2-D images, got shape {img.shape}")
    if img.dtype.kind == "f" or img.dtype.kind == "i":
        if img.size and (img.min() < 0 or img.max() > 65535):
            raise PGMError("values outside the 16-bit range")
        img = np.rint(img).astype(np.uint16)
    if maxval is None:
        maxval = 255 if img.dtype == np.uint8 else 65535
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    h, w = img.shape
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + img.astype(dtype).tobytes()


def read_pgm(path) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def write_pgm(path, img: np.ndarray, maxval: int | None = None) -> None:
    Path(path).write_bytes(encode_pgm(img, maxval))
