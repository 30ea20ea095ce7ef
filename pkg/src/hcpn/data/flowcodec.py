"""Middlebury color-wheel encoding of 2-D flow fields, and its inverse.

Direction picks a hue on the 55-entry wheel (red-yellow-green-cyan-blue-magenta),
magnitude relative to ``max_mag`` picks saturation; zero flow is white.
"""

from __future__ import annotations

import numpy as np


def make_colorwheel() -> np.ndarray:
    """``(55, 3)`` wheel in [0, 1], without the integer flooring of the original tables."""
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    segments = []
    for n, fn in (
        (ry, lambda t: (1.0, t, 0.0)),
        (yg, lambda t: (1.0 - t, 1.0, 0.0)),
        (gc, lambda t: (0.0, 1.0, t)),
        (cb, lambda t: (0.0, 1.0 - t, 1.0)),
        (bm, lambda t: (t, 0.0, 1.0)),
        (mr, lambda t: (1.0, 0.0, 1.0 - t)),
    ):
        segments.extend(fn(i / n) for i in range(n))
    return np.array(segments)


COLORWHEEL = make_colorwheel()
NCOLS = len(COLORWHEEL)


def encode_flow(flow: np.ndarray, max_mag: float) -> np.ndarray:
    """``(h, w, 2)`` flow in pixels to an ``(h, w, 3)`` image in [0, 1].

    Magnitudes above ``max_mag`` are clamped to full saturation.
    """
    if not max_mag > 0:
        raise ValueError(f"max_mag must be positive, got {max_mag}")
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[..., 0], flow[..., 1]
    rad = np.minimum(np.hypot(u, v) / max_mag, 1.0)
    a = np.arctan2(-v, -u) / np.pi
    fk = (a + 1.0) / 2.0 * (NCOLS - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % NCOLS
    f = (fk - k0)[..., None]
    col = (1.0 - f) * COLORWHEEL[k0] + f * COLORWHEEL[k1]
    return 1.0 - rad[..., None] * (1.0 - col)


def decode_flow(image: np.ndarray, max_mag: float) -> np.ndarray:
    """Invert :func:`encode_flow` (8-bit inputs are rescaled to [0, 1] first)."""
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img / 255.0
    img = img.astype(np.float64)
    shape = img.shape[:-1]
    px = img.reshape(-1, 3)
    rad = np.clip(1.0 - px.min(axis=1), 0.0, 1.0)
    safe = np.where(rad > 0, rad, 1.0)
    wheel = 1.0 - (1.0 - px) / safe[:, None]

    # nearest point on the wheel polyline, segments k -> k+1 for k < NCOLS - 1
    a = COLORWHEEL[:-1]
    d = COLORWHEEL[1:] - a
    rel = wheel[:, None, :] - a[None]
    t = np.clip((rel * d).sum(-1) / (d * d).sum(-1), 0.0, 1.0)
    dist = ((rel - t[..., None] * d) ** 2).sum(-1)
    k = dist.argmin(axis=1)
    fk = k + t[np.arange(len(k)), k]
    theta = (fk / (NCOLS - 1) * 2.0 - 1.0) * np.pi
    mag = rad * max_mag
    flow = np.stack([-mag * np.cos(theta), -mag * np.sin(theta)], axis=-1)
    flow[rad == 0] = 0.0
    return flow.reshape(shape + (2,))


def default_max_mag(flows, percentile: float = 99.0) -> float:
    """99th-percentile flow magnitude over a sequence, falling back to 1 for still scenes."""
    mags = np.concatenate([np.hypot(f[..., 0], f[..., 1]).ravel() for f in flows])
    m = float(np.percentile(mags, percentile)) if mags.size else 0.0
    return m if m > 0 else 1.0
