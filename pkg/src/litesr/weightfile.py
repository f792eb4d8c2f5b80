"""Binary weight container (``.lsrw``).

Little-endian layout::

    magic      4s   b"LSRW"
    version    u16
    config     6 x u16  ch_e ch_r ch_dh ch_ih n_earb n_rlfb
               u8       flags (bit0 ablate_earb, bit1 ablate_rlfb)
               u8       upscale
    count      u32
    entries    count x {
                 path_len u16, path utf-8,
                 dtype u8 (0 fp32, 1 int8, 2 int32),
                 shape 4 x u32 (left-padded with 1s),
                 scale f32 (int8 / int32 only),
                 raw data
               }
    crc32      u32 over every preceding byte

The dilation schedule is not stored; readers use the default.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .model import ModelConfig, expected_shapes
from .tensor import QTensor

MAGIC = b"LSRW"
VERSION = 1
FP32, INT8, INT32 = 0, 1, 2

_HEADER = struct.Struct("<4sH6HBBI")
_ENTRY_META = struct.Struct("<B4I")
_DTYPES = {FP32: np.dtype("<f4"), INT8: np.dtype("i1"), INT32: np.dtype("<i4")}


class ContainerError(ValueError):
    """Malformed or corrupted weight container."""


def _pad_shape(shape) -> tuple:
    shape = tuple(int(s) for s in shape)
    if len(shape) > 4:
        raise ContainerError(f"rank {len(shape)} entry cannot be stored")
    return (1,) * (4 - len(shape)) + shape


def encode_container(config: ModelConfig, entries: dict) -> bytes:
    flags = int(config.ablate_earb) | (int(config.ablate_rlfb) << 1)
    out = bytearray(_HEADER.pack(MAGIC, VERSION, config.ch_e, config.ch_r, config.ch_dh, config.ch_ih,
                                 config.n_earb, config.n_rlfb, flags, config.upscale, len(entries)))
    for path, value in entries.items():
        raw = path.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        if isinstance(value, QTensor):
            code = INT8 if value.data.dtype == np.int8 else INT32
            arr = value.data
        else:
            code = FP32
            arr = np.asarray(value, dtype=np.float32)
        out += _ENTRY_META.pack(code, *_pad_shape(arr.shape))
        if code != FP32:
            out += struct.pack("<f", value.scale)
        out += np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


def decode_container(blob: bytes) -> tuple[ModelConfig, dict]:
    """Parse a container. Entry shapes are restored from the config where known."""
    if len(blob) < _HEADER.size + 4:
        raise ContainerError("file too short")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise ContainerError("CRC32 mismatch")
    magic, version, ch_e, ch_r, ch_dh, ch_ih, n_earb, n_rlfb, flags, upscale, count = _HEADER.unpack_from(body)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"unsupported version {version}")
    config = ModelConfig(ch_e, ch_r, ch_dh, ch_ih, n_earb, n_rlfb, upscale,
                         ablate_earb=bool(flags & 1), ablate_rlfb=bool(flags & 2))
    shapes = expected_shapes(config)
    pos = _HEADER.size
    entries = {}
    try:
        for _ in range(count):
            (plen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            path = body[pos:pos + plen].decode("utf-8")
            pos += plen
            code, *shape = _ENTRY_META.unpack_from(body, pos)
            pos += _ENTRY_META.size
            if code not in _DTYPES:
                raise ContainerError(f"{path}: unknown dtype code {code}")
            scale = None
            if code != FP32:
                (scale,) = struct.unpack_from("<f", body, pos)
                pos += 4
            dt = _DTYPES[code]
            n = int(np.prod(shape))
            if pos + n * dt.itemsize > len(body):
                raise ContainerError(f"{path}: truncated payload")
            arr = np.frombuffer(body, dtype=dt, count=n, offset=pos).reshape(shape)
            pos += n * dt.itemsize
            if path in shapes:
                arr = arr.reshape(shapes[path])
            arr = arr.astype(dt.newbyteorder("="), copy=True)
            entries[path] = arr if code == FP32 else QTensor(arr, float(scale))
    except struct.error as exc:
        raise ContainerError(f"truncated container: {exc}") from None
    if pos != len(body):
        raise ContainerError(f"{len(body) - pos} trailing bytes after last entry")
    return config, entries


def save_container(path, config: ModelConfig, entries: dict) -> int:
    blob = encode_container(config, entries)
    Path(path).write_bytes(blob)
    return len(blob)


def load_container(path) -> tuple[ModelConfig, dict]:
    return decode_container(Path(path).read_bytes())


def save_model(path, model) -> int:
    """Write an FP32 ``Model`` or a ``QuantizedModel``; returns bytes written."""
    from .quantizer import QuantizedModel

    entries = model.container_entries() if isinstance(model, QuantizedModel) else dict(model.weights.entries)
    return save_container(path, model.config, entries)


def load_model(path):
    """Load a container as ``Model`` (all FP32) or ``QuantizedModel`` (any INT8 entry)."""
    from .model import ModelWeights, build_model
    from .quantizer import QuantizedModel

    config, entries = load_container(path)
    if any(isinstance(v, QTensor) for v in entries.values()):
        return QuantizedModel.from_entries(config, entries)
    return build_model(config, ModelWeights(entries))
