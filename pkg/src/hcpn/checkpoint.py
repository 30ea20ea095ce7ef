"""Versioned binary parameter blobs with a JSON sidecar.

Layout: ``b"HCPN"``, format version (u32), tensor count (u32), then per tensor
the name length (u16), utf-8 name, rank (u8), extents (u32 each) and raw
little-endian float32 values. Tensors are written in sorted name order so the
same parameters always give the same bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError

MAGIC = b"HCPN"
VERSION = 1


def checkpoint_bytes(params: dict) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name in sorted(params):
        arr = np.asarray(getattr(params[name], "data", params[name]))
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(path, params: dict, config: dict | None = None, extra: dict | None = None) -> Path:
    """Write the blob and ``<path>.json`` listing names, shapes and the model config."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(params))
    meta = {
        "format_version": VERSION,
        "tensors": {k: list(np.shape(getattr(v, "data", v))) for k, v in sorted(params.items())},
        "config": config or {},
    }
    if extra:
        meta.update(extra)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def _need(raw: bytes, pos: int, n: int, path, what: str):
    if pos + n > len(raw):
        raise FormatError(f"truncated while reading {what}", offset=pos, path=path)


def read_checkpoint(path) -> dict:
    """Name -> float32 array; malformed blobs raise :class:`FormatError` with the byte offset."""
    raw = Path(path).read_bytes()
    _need(raw, 0, 12, path, "header")
    if raw[:4] != MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}", offset=0, path=path)
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}", offset=4, path=path)
    pos, params = 12, {}
    for _ in range(count):
        _need(raw, pos, 2, path, "name length")
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        _need(raw, pos, nlen + 1, path, "tensor name")
        try:
            name = raw[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not utf-8", offset=pos, path=path) from None
        pos += nlen
        rank = raw[pos]
        pos += 1
        _need(raw, pos, 4 * rank, path, f"extents of {name}")
        shape = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        _need(raw, pos, nbytes, path, f"values of {name}")
        params[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes", offset=pos, path=path)
    return params


def read_sidecar(path) -> dict:
    side = sidecar_path(path)
    if not side.exists():
        return {}
    try:
        return json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt sidecar: {exc.msg}", offset=exc.pos, path=side) from None


def match_params(expected: dict, loaded: dict) -> dict:
    """Check ``loaded`` against freshly initialized ``expected`` tensors, tensor by tensor."""
    missing = sorted(set(expected) - set(loaded))
    if missing:
        raise ConfigurationError(f"checkpoint lacks tensor {missing[0]!r} ({len(missing)} missing)")
    unknown = sorted(set(loaded) - set(expected))
    if unknown:
        raise ConfigurationError(f"checkpoint has unexpected tensor {unknown[0]!r}")
    for name in sorted(expected):
        want = tuple(np.shape(getattr(expected[name], "data", expected[name])))
        if tuple(loaded[name].shape) != want:
            raise ConfigurationError(
                f"tensor {name!r} has shape {tuple(loaded[name].shape)} in the checkpoint, config expects {want}")
    return loaded
