"""Whole-sequence inference along overlapping frame pairs."""

from __future__ import annotations

import numpy as np

from .errors import ContractError, FormatError

THRESHOLD = 0.5


def pair_inputs(ds, ts) -> tuple:
    """Stacked ``(frame_t, frame_t+1, flow_rgb_t)`` batches for pair indices ``ts``."""
    fk = np.stack([ds.frames[t] for t in ts])
    fk1 = np.stack([ds.frames[t + 1] for t in ts])
    fl = np.stack([ds.flow_rgb[t] for t in ts])
    return fk, fk1, fl


def propagate_inference(model, ds, batch: int = 8) -> list:
    """Probability map per frame.

    Every consecutive pair ``(t, t+1)`` is run once; frames covered by two
    pairs get the pixelwise mean of both predictions.
    """
    n = len(ds.frames)
    if n < 2:
        raise ContractError(f"propagation needs at least 2 frames, got {n}")
    if len(ds.flow_rgb) != n - 1:
        raise FormatError(f"{n} frames need {n - 1} flow images, found {len(ds.flow_rgb)}")
    h, w = ds.frames[0].shape[:2]
    total = np.zeros((n, h, w))
    count = np.zeros(n)
    pairs = list(range(n - 1))
    for i in range(0, len(pairs), batch):
        ts = pairs[i:i + batch]
        pk, pk1 = model.predict(*pair_inputs(ds, ts))
        for j, t in enumerate(ts):
            total[t] += pk[j]
            total[t + 1] += pk1[j]
            count[t] += 1
            count[t + 1] += 1
    return [total[t] / count[t] for t in range(n)]


def binarize(prob: np.ndarray, threshold: float = THRESHOLD) -> np.ndarray:
    return np.asarray(prob) >= threshold
