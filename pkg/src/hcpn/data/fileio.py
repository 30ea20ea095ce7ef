"""Readers and writers for binary PPM/PGM images and Middlebury ``.flo`` flow files."""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError

FLO_MAGIC = 202021.25
FLO_TAG = b"PIEH"

_HEADER = re.compile(rb"(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def _netpbm_bytes(arr: np.ndarray, magic: str, maxval: int) -> bytes:
    h, w = arr.shape[:2]
    header = f"{magic}\n{w} {h}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    return header + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def _read_netpbm(path, magic: bytes):
    raw = Path(path).read_bytes()
    m = _HEADER.match(raw)
    if m is None:
        raise FormatError("malformed netpbm header", offset=0, path=path)
    if m.group(1) != magic:
        raise FormatError(f"expected {magic.decode()} but found {m.group(1).decode()}", offset=0, path=path)
    w, h, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    if not 0 < maxval < 65536:
        raise FormatError(f"maxval {maxval} out of range", offset=m.start(4), path=path)
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * channels * dtype.itemsize
    start = m.end()
    if len(raw) - start < need:
        raise FormatError(f"payload truncated: need {need} bytes, found {len(raw) - start}", offset=len(raw), path=path)
    arr = np.frombuffer(raw, dtype=dtype, count=w * h * channels, offset=start)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return arr.reshape(shape).astype(np.uint16 if maxval > 255 else np.uint8), maxval


def write_ppm(path, image: np.ndarray) -> None:
    """Write an ``(h, w, 3)`` uint8 image, or a float image in [0, 1] (rounded to 8 bits)."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"PPM needs an (h, w, 3) array, got {image.shape}")
    if image.dtype != np.uint8:
        image = to_uint8(image)
    Path(path).write_bytes(_netpbm_bytes(image, "P6", 255))


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6")[0]


def write_pgm(path, image: np.ndarray, bits: int = 8) -> None:
    """Write an ``(h, w)`` map; floats in [0, 1] are scaled to 8 or 16 bits, bools to 0/255."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise FormatError(f"PGM needs an (h, w) array, got {image.shape}")
    maxval = 255 if bits == 8 else 65535
    if image.dtype == bool:
        image = image.astype(np.uint16) * maxval
    elif np.issubdtype(image.dtype, np.floating):
        image = np.round(np.clip(image, 0.0, 1.0) * maxval)
    Path(path).write_bytes(_netpbm_bytes(image, "P5", maxval))


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5")[0]


def read_mask(path) -> np.ndarray:
    """Binary mask from an 8-bit PGM (nonzero above half-scale is foreground)."""
    arr = np.asarray(read_pgm(path))
    return arr >= (128 if arr.dtype == np.uint8 else 32768)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)


def flo_bytes(flow: np.ndarray) -> bytes:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise FormatError(f"flow must be (h, w, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    return struct.pack("<fii", FLO_MAGIC, w, h) + np.ascontiguousarray(flow, dtype="<f4").tobytes()


def write_flo(path, flow: np.ndarray) -> None:
    """Write ``(h, w, 2)`` displacements (u along width, v along height) in Middlebury format."""
    Path(path).write_bytes(flo_bytes(flow))


def read_flo(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(f"header truncated at {len(raw)} bytes", offset=len(raw), path=path)
    if raw[:4] != FLO_TAG:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {FLO_TAG!r}", offset=0, path=path)
    w, h = struct.unpack_from("<ii", raw, 4)
    if w <= 0 or h <= 0:
        raise FormatError(f"invalid extents {w}x{h}", offset=4, path=path)
    need = 12 + w * h * 8
    if len(raw) < need:
        raise FormatError(f"payload truncated: need {need} bytes, found {len(raw)}", offset=len(raw), path=path)
    return np.frombuffer(raw, dtype="<f4", count=w * h * 2, offset=12).reshape(h, w, 2).astype(np.float32)
