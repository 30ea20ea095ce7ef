"""Mask decoder, motion contour restriction, and the training objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError
from .params import HEAD_GAIN, RELU_GAIN, add_conv, conv, rng_from

ASPP_DILATIONS = (1, 6, 12, 18)
CLAMP = 1e-6
VOTE_THRESHOLD = 0.5
# contour heads start slightly above the vote threshold so the restriction gate opens fully at initialization
CONTOUR_BIAS = 0.25

_SQUARE = np.ones((3, 3), dtype=bool)
_CROSS = ndimage.generate_binary_structure(2, 1)


def init_decoder(level_channels: list, width: int, seed, dilations=ASPP_DILATIONS,
                 fine_channels: int | None = None) -> dict:
    """``level_channels[l]`` is the channel count of the bridge output at level ``l + 1``.

    ``fine_channels`` adds a full-resolution stage fed by a stride-1 skip with
    that many channels; the mask head then runs at output resolution.
    """
    rng = rng_from(seed)
    p = {}
    deep = level_channels[-1]
    for i in range(len(dilations)):
        add_conv(p, rng, f"aspp.b{i}", 3, deep, width, gain=RELU_GAIN)
    add_conv(p, rng, "aspp.gap", 1, deep, width, gain=RELU_GAIN)
    add_conv(p, rng, "aspp.fuse", 1, width * (len(dilations) + 1), width, gain=RELU_GAIN)
    for l, c in enumerate(level_channels, start=1):
        add_conv(p, rng, f"skip.l{l}", 1, c, width)
        add_conv(p, rng, f"contour.l{l}", 1, width, 1, gain=HEAD_GAIN)
        p[f"contour.l{l}.b"].data[:] = CONTOUR_BIAS
        if l < len(level_channels):
            add_conv(p, rng, f"up.l{l}", 3, width, width, gain=RELU_GAIN)
    add_conv(p, rng, "mask", 1, width, 1, gain=HEAD_GAIN)
    if fine_channels:
        add_conv(p, rng, "fine.skip", 1, fine_channels, width)
        add_conv(p, rng, "fine.conv", 3, width, width, gain=RELU_GAIN)
    return p


def clamp_dilation(d: int, extent: int, k: int = 3) -> int:
    """Largest dilation not above ``d`` whose kernel span fits inside ``extent``."""
    return max(1, min(d, (extent - 1) // (k - 1)))


def aspp(x, params: dict, dilations=ASPP_DILATIONS) -> T.Tensor:
    n, h, w, _ = x.shape
    branches = []
    for i, d in enumerate(dilations):
        branches.append(T.relu(conv(x, params, f"aspp.b{i}", dilation=clamp_dilation(d, min(h, w)))))
    pooled = T.relu(conv(T.global_avg_pool(x), params, "aspp.gap"))
    branches.append(T.resize_bilinear(pooled, (h, w)))
    return T.relu(conv(T.concat(branches, axis=-1), params, "aspp.fuse"))


def decode_masks(features: list, params: dict, out_size: tuple, dilations=ASPP_DILATIONS, fine=None):
    """Coarse mask and per-level contour maps from bridge features.

    ``features`` holds one ``(B, H_l, W_l, C_l)`` map per level, shallow first.
    ``out_size`` is ``(h, w)``. Returns ``(coarse, contours)`` as ``(B, h, w)``
    tensors in [0, 1]; ``contours`` is ordered shallow first. Decoders built
    with a fine stage also take ``fine``, a ``(B, h, w, C)`` full-resolution
    skip map merged in one last upsampling step before the mask head.
    """
    has_fine = "fine.skip.w" in params
    if has_fine != (fine is not None):
        raise ConfigurationError("the fine skip map and the decoder's fine stage must come together")
    levels = sum(1 for k in params if k.startswith("skip.l") and k.endswith(".w"))
    if len(features) != levels:
        raise ConfigurationError(f"decoder built for {levels} levels, got {len(features)} feature maps")
    for l in range(1, levels):
        hi, lo = features[l - 1].shape, features[l].shape
        if hi[1] != 2 * lo[1] or hi[2] != 2 * lo[2]:
            raise DimensionError(f"level {l} map {hi} is not twice the size of level {l + 1} map {lo}")
    h, w = out_size
    n = features[0].shape[0]
    contour_logits = [None] * levels
    x = T.add(aspp(features[-1], params, dilations), conv(features[-1], params, f"skip.l{levels}"))
    contour_logits[levels - 1] = conv(x, params, f"contour.l{levels}")
    for l in range(levels - 1, 0, -1):
        skip = conv(features[l - 1], params, f"skip.l{l}")
        x = T.add(T.resize_bilinear(x, skip.shape[1:3]), skip)
        x = T.relu(conv(x, params, f"up.l{l}"))
        contour_logits[l - 1] = conv(x, params, f"contour.l{l}")
    if has_fine:
        if tuple(fine.shape[1:3]) != (h, w):
            raise DimensionError(f"fine skip map {fine.shape} does not match output size {out_size}")
        x = T.add(T.resize_bilinear(x, (h, w)), conv(fine, params, "fine.skip"))
        x = T.relu(conv(x, params, "fine.conv"))
    # 1x1 conv commutes with bilinear resizing, so heads run at feature resolution
    coarse = T.sigmoid(T.resize_bilinear(conv(x, params, "mask"), (h, w)))
    contours = [T.sigmoid(T.resize_bilinear(c, (h, w))) for c in contour_logits]
    flat = lambda t: T.reshape(t, (n, h, w))
    return flat(coarse), [flat(c) for c in contours]


# ---------------------------------------------------------------- contour restriction


def _close(mask: np.ndarray) -> np.ndarray:
    dil = ndimage.binary_dilation(mask, _SQUARE, border_value=0)
    return ndimage.binary_erosion(dil, _SQUARE, border_value=1)


def fill_region(vote: np.ndarray, threshold: float = VOTE_THRESHOLD) -> np.ndarray:
    """Indicator of pixels on or enclosed by the voted contour, for one ``(h, w)`` map."""
    closed = _close(vote >= threshold)
    labels, _ = ndimage.label(~closed, structure=_CROSS)
    border = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
    outside = np.isin(labels, border[border > 0])
    return ~outside


def mcr_refine(coarse, contours: list, return_gate: bool = False):
    """Gate the coarse mask by the region enclosed by the averaged contours.

    ``R = max(vote, inside)`` with ``inside`` the flood-filled region (held
    constant for differentiation); result ``R * coarse``. Accepts ``(h, w)`` or
    ``(B, h, w)`` maps.
    """
    coarse = T.as_tensor(coarse)
    contours = [T.as_tensor(c) for c in contours]
    if not contours:
        raise ContractError("at least one contour map is required")
    for c in contours:
        if c.shape != coarse.shape:
            raise DimensionError(f"contour map {c.shape} does not match coarse mask {coarse.shape}")
    vote = T.mul(_sum(contours), 1.0 / len(contours))
    v = vote.data
    if v.ndim == 2:
        inside = fill_region(v)
    else:
        inside = np.stack([fill_region(vi) for vi in v.reshape(-1, *v.shape[-2:])]).reshape(v.shape)
    gate = T.maximum(vote, T.Tensor._wrap(inside.astype(v.dtype), False))
    refined = T.mul(gate, coarse)
    return (refined, gate) if return_gate else refined


def _sum(ts: list) -> T.Tensor:
    out = ts[0]
    for t in ts[1:]:
        out = T.add(out, t)
    return out


def contour_from_mask(mask: np.ndarray) -> np.ndarray:
    """Morphological gradient ``dilate(G) XOR erode(G)`` with a 3x3 square, per ``(h, w)`` map.

    Pixels outside the image count as background, so a full-frame mask yields a
    one-pixel band along the border.
    """
    mask = np.asarray(mask)
    if mask.dtype != bool:
        if not np.all((mask == 0) | (mask == 1)):
            raise ContractError("contour_from_mask needs a binary mask")
        mask = mask.astype(bool)
    if mask.ndim > 2:
        return np.stack([contour_from_mask(m) for m in mask.reshape(-1, *mask.shape[-2:])]).reshape(mask.shape)
    dil = ndimage.binary_dilation(mask, _SQUARE, border_value=0)
    ero = ndimage.binary_erosion(mask, _SQUARE, border_value=0)
    return dil ^ ero


# ---------------------------------------------------------------- objective


@dataclass
class MaskBundle:
    """Predictions and ground truth for one frame (or a batch of frames)."""

    coarse: T.Tensor
    contours: list
    refined: T.Tensor
    gt_mask: np.ndarray | None = None
    gt_contour: np.ndarray | None = None
    extras: dict = field(default_factory=dict)


def _check_binary(g, name: str) -> np.ndarray:
    g = np.asarray(g)
    if not np.all((g == 0) | (g == 1)):
        raise ContractError(f"{name} must be binary")
    return g


def bce(target: np.ndarray, prob, balanced: bool = False) -> T.Tensor:
    """Pixel-averaged binary cross-entropy with probabilities clamped to [1e-6, 1 - 1e-6].

    With ``balanced`` the positive and negative pixels each carry half of the
    total weight, so a sparse target (a contour ring) is not drowned out by the
    background. Weights are scaled to average 1, which keeps the uniform-0.5
    value at ln 2.
    """
    p = T.clip(prob, CLAMP, 1.0 - CLAMP)
    g = np.asarray(target, dtype=p.dtype)
    wp, wn = 1.0, 1.0
    if balanced:
        frac = float(g.mean())
        if 0.0 < frac < 1.0:
            wp, wn = 0.5 / frac, 0.5 / (1.0 - frac)
    pos = T.mul(T.Tensor._wrap(g * wp, False), T.log(p))
    negs = T.mul(T.Tensor._wrap((1.0 - g) * wn, False), T.log(T.sub(1.0, p)))
    return T.neg(T.mean(T.add(pos, negs)))


def training_loss(bundle: MaskBundle, balanced_contours: bool = True) -> T.Tensor:
    """``BCE(G_m, P_m) + mean_j BCE(G_r, P_r_j)``, the contour terms class-balanced by default."""
    if bundle.gt_mask is None or bundle.gt_contour is None:
        raise ContractError("bundle has no ground truth")
    gm = _check_binary(bundle.gt_mask, "mask ground truth")
    gr = _check_binary(bundle.gt_contour, "contour ground truth")
    region = bce(gm, bundle.refined)
    contour = _sum([bce(gr, p, balanced=balanced_contours) for p in bundle.contours])
    return T.add(region, T.mul(contour, 1.0 / len(bundle.contours)))
