"""Three-stream hierarchical backbone.

Two appearance streams (frames k and k+1) share one set of weights; the motion
stream, fed with the color-coded flow image, has its own. Each level is
``conv3x3 -> relu -> conv3x3/stride -> relu``, halving the spatial extent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .params import RELU_GAIN, add_conv, conv, rng_from


@dataclass(frozen=True)
class BackboneConfig:
    levels: int = 4
    channels_per_level: tuple = (16, 32, 64, 128)
    stem_stride: int = 2
    input_size: tuple = (64, 64)  # (w, h)

    def __post_init__(self):
        object.__setattr__(self, "channels_per_level", tuple(int(c) for c in self.channels_per_level))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if self.levels < 1:
            raise ConfigurationError(f"levels must be >= 1, got {self.levels}")
        if len(self.channels_per_level) != self.levels:
            raise ConfigurationError(
                f"{self.levels} levels need {self.levels} channel counts, got {self.channels_per_level}")
        if any(b <= a for a, b in zip(self.channels_per_level, self.channels_per_level[1:])):
            raise ConfigurationError(f"channels must be strictly increasing: {self.channels_per_level}")
        div = self.stem_stride ** self.levels
        w, h = self.input_size
        if w % div or h % div:
            raise ConfigurationError(f"input size {self.input_size} not divisible by {div}")

    def level_shape(self, level: int) -> tuple:
        """(H, W, C) of the feature map at 1-based ``level``."""
        w, h = self.input_size
        s = self.stem_stride ** level
        return (h // s, w // s, self.channels_per_level[level - 1])


@dataclass
class StreamFeatures:
    """Per-level feature maps: appearance of frame k, motion, appearance of frame k+1."""

    appearance_k: list = field(default_factory=list)
    motion: list = field(default_factory=list)
    appearance_k1: list = field(default_factory=list)
    # full-resolution first-conv activations (appearance k, motion, appearance k+1)
    stem: tuple = ()

    @property
    def levels(self) -> int:
        return len(self.motion)

    def level(self, l: int) -> tuple:
        return self.appearance_k[l - 1], self.motion[l - 1], self.appearance_k1[l - 1]


def init_params(config: BackboneConfig, seed) -> dict:
    """Draw backbone kernels from U(-sqrt(3/fan_in), sqrt(3/fan_in)); biases start at zero."""
    rng = rng_from(seed)
    params = {}
    for stream in ("app", "mot"):
        cin = 3
        for l, c in enumerate(config.channels_per_level, start=1):
            add_conv(params, rng, f"{stream}.l{l}.conv1", 3, cin, c, gain=RELU_GAIN)
            add_conv(params, rng, f"{stream}.l{l}.conv2", 3, c, c, gain=RELU_GAIN)
            cin = c
    return params


def backbone(x, params: dict, stream: str, config: BackboneConfig, with_stem: bool = False):
    """Per-level features; with ``with_stem`` also the stride-1 output of the first conv."""
    feats, stem = [], None
    for l in range(1, config.levels + 1):
        x = T.relu(conv(x, params, f"{stream}.l{l}.conv1"))
        if stem is None:
            stem = x
        x = T.relu(conv(x, params, f"{stream}.l{l}.conv2", stride=config.stem_stride))
        feats.append(x)
    return (feats, stem) if with_stem else feats


def _zeros_like_levels(feats: list) -> list:
    return [T.Tensor(np.zeros(f.shape, dtype=f.dtype)) for f in feats]


def encode_streams(frame_k, frame_k1, flow_rgb, params: dict, config: BackboneConfig,
                   use_flow: bool = True, use_frames: bool = True) -> StreamFeatures:
    """Extract per-level appearance and motion features.

    Inputs are ``(h, w, 3)`` or batched ``(N, h, w, 3)`` images in [0, 1]. With
    ``use_flow=False`` (or ``use_frames=False``) that stream's features are
    replaced by zeros, which is how the single-modality ablations are built.
    """
    frame_k, frame_k1, flow_rgb = (T.as_tensor(x) for x in (frame_k, frame_k1, flow_rgb))
    if not (frame_k.shape == frame_k1.shape == flow_rgb.shape):
        raise DimensionError(
            f"stream inputs must share a shape: {frame_k.shape}, {frame_k1.shape}, {flow_rgb.shape}")
    if frame_k.shape[-1] != 3:
        raise DimensionError(f"inputs need 3 channels, got {frame_k.shape}")
    batched = frame_k.ndim == 4
    if not batched:
        frame_k, frame_k1, flow_rgb = (T.reshape(x, (1,) + x.shape) for x in (frame_k, frame_k1, flow_rgb))
    n = frame_k.shape[0]

    # one pass over both frames: identical weights, identical arithmetic
    app, app_stem = backbone(T.concat([frame_k, frame_k1], axis=0), params, "app", config, with_stem=True)
    app_k = [T.take(a, 0, n) for a in app] + [T.take(app_stem, 0, n)]
    app_k1 = [T.take(a, n, 2 * n) for a in app] + [T.take(app_stem, n, 2 * n)]
    if use_flow:
        mot, mot_stem = backbone(flow_rgb, params, "mot", config, with_stem=True)
        mot = mot + [mot_stem]
    else:
        mot = _zeros_like_levels(app_k)
    if not use_frames:
        app_k, app_k1 = _zeros_like_levels(app_k), _zeros_like_levels(app_k1)
    if not batched:
        app_k, mot, app_k1 = ([T.reshape(f, f.shape[1:]) for f in fs] for fs in (app_k, mot, app_k1))
    # the last entry of each list is the stem, kept apart from the per-level maps
    return StreamFeatures(app_k[:-1], mot[:-1], app_k1[:-1], (app_k[-1], mot[-1], app_k1[-1]))

