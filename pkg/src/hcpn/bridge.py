"""Global-local attention context: per-channel recalibration between encoder and decoder."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError


def init_gac(channels: int, spatial: tuple | None = None) -> dict:
    """Identity-like start: ``W_l = 1``, ``b = 0``, and ``W_g`` set so the global branch has unit RMS.

    ``spatial`` is the ``(H, W)`` of the map this bridge will see; the spatial
    L2 normalization divides by roughly ``sqrt(H*W)`` and ``W_g`` undoes that.
    """
    scale = float(np.sqrt(spatial[0] * spatial[1])) if spatial else 1.0
    return {
        "wg": T.Tensor(np.full(channels, scale), requires_grad=True, name="wg"),
        "wl": T.Tensor(np.ones(channels), requires_grad=True, name="wl"),
        "b": T.Tensor(np.zeros(channels), requires_grad=True, name="b"),
    }


def gac_forward(v, params: dict) -> T.Tensor:
    """Recalibrate each channel of ``v`` (..., H, W, 2C).

    ``g = W_g * l2norm(V^c)``, ``l = g * tanh(W_l * channelnorm(V)^c + b)``,
    output ``g + l``. Channels stay independent; the shape is preserved.
    """
    v = T.as_tensor(v)
    wg, wl, b = params["wg"], params["wl"], params["b"]
    c = v.shape[-1]
    if not (wg.shape == wl.shape == b.shape == (c,)):
        raise DimensionError(
            f"GAC parameters {wg.shape}, {wl.shape}, {b.shape} do not match {c} input channels")
    g = T.mul(T.normalize(v, "l2_channel"), wg)
    local = T.mul(g, T.tanh(T.add(T.mul(T.normalize(v, "channel_pos"), wl), b)))
    return T.add(g, local)
