"""Binary checkpoints for named parameter tables.

Layout (all integers u32 little-endian)::

    b"BNDC" | version | count | { name_len | name (utf-8) | rows | cols | f32 LE row-major }* | crc32

The CRC covers every byte before it, magic included.  Parameters are written
in sorted name order so the same table always yields the same bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"BNDC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(arrays: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name in sorted(arrays):
        a = np.asarray(getattr(arrays[name], "data", arrays[name]))
        if a.ndim != 2:
            raise CheckpointError(f"parameter {name!r} is not 2-D (shape {a.shape})")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<II", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes, source="<bytes>") -> dict:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{source}: CRC mismatch, file is corrupt")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    pos, out = 12, {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            rows, cols = struct.unpack_from("<II", body, pos)
            pos += 8
            size = rows * cols * 4
            if pos + size > len(body):
                raise CheckpointError(f"{source}: truncated data for {name!r}")
            out[name] = np.frombuffer(body, dtype="<f4", count=rows * cols, offset=pos).reshape(rows, cols).astype(np.float32)
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"{source}: truncated checkpoint") from exc
    if pos != len(body):
        raise CheckpointError(f"{source}: {len(body) - pos} trailing bytes")
    return out


def save_checkpoint(path, params, meta: dict | None = None) -> None:
    """Write ``params`` (name -> array or Tensor); ``meta`` goes to ``<path>.json``."""
    path = Path(path)
    path.write_bytes(encode(dict(params)))
    if meta is not None:
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> dict:
    path = Path(path)
    return decode(path.read_bytes(), str(path))


def load_meta(path) -> dict:
    side = Path(path)
    side = side.with_suffix(side.suffix + ".json")
    if not side.exists():
        raise CheckpointError(f"{path}: missing metadata file {side.name}")
    return json.loads(side.read_text())


def restore_into(params, arrays: dict, source="checkpoint") -> None:
    """Copy ``arrays`` into an existing parameter table; names and shapes must match exactly."""
    missing = sorted(set(params) - set(arrays))
    extra = sorted(set(arrays) - set(params))
    if missing or extra:
        raise CheckpointError(f"{source}: parameter mismatch (missing {missing}, unexpected {extra})")
    for name, t in params.items():
        a = arrays[name]
        if a.shape != t.data.shape:
            raise CheckpointError(f"{source}: {name!r} has shape {a.shape}, expected {t.data.shape}")
        t.data = a.astype(t.data.dtype, copy=True)
