"""End-to-end network: encoder, co-attention cascade, bridge, decoder."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .bridge import gac_forward, init_gac
from .coattention import FUSIONS, CascadeOptions, hcpn_cascade, init_block, init_carry, split_blocks
from .decoder import ASPP_DILATIONS, MaskBundle, decode_masks, init_decoder, mcr_refine
from .encoder import BackboneConfig, encode_streams
from .encoder import init_params as init_encoder
from .errors import ConfigurationError
from .params import cast, merge, rng_from, scope


@dataclass(frozen=True)
class ModelConfig:
    """Architecture plus the structural ablation switches.

    ``cascade_levels`` counts the co-attention blocks, applied from the
    shallowest backbone level downward; deeper levels pass raw stream features.
    """

    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    cascade_levels: int = 4
    heads: int = 4
    reduction: int = 4
    decoder_width: int = 32
    aspp_dilations: tuple = ASPP_DILATIONS
    fusion: str = "gaf"
    use_flow: bool = True
    use_frames: bool = True
    two_stream: bool = False
    bypass_pcm: bool = False
    bypass_ccm: bool = False
    bypass_gac: bool = False
    bypass_mcr: bool = False
    fine_stage: bool = True

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            object.__setattr__(self, "backbone", BackboneConfig(**self.backbone))
        object.__setattr__(self, "aspp_dilations", tuple(self.aspp_dilations))
        if not 1 <= self.cascade_levels <= self.backbone.levels:
            raise ConfigurationError(
                f"cascade_levels must lie in [1, {self.backbone.levels}], got {self.cascade_levels}")
        if self.fusion not in FUSIONS:
            raise ConfigurationError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if not (self.use_flow or self.use_frames):
            raise ConfigurationError("at least one of the flow and frame streams must stay enabled")

    @property
    def cascade_options(self) -> CascadeOptions:
        return CascadeOptions(self.fusion, self.bypass_pcm, self.bypass_ccm, self.two_stream)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = BackboneConfig(**d.get("backbone", {}))
        return cls(**d)


def init_model_params(config: ModelConfig, seed) -> dict:
    """All parameters under the prefixes ``enc.``, ``hcpn.{i}.``, ``carry.{i}.``, ``gac.l{l}.``, ``dec.``."""
    rng = rng_from(seed)
    bb = config.backbone
    params = merge({}, "enc.", init_encoder(bb, rng))
    chans = bb.channels_per_level
    for i in range(config.cascade_levels):
        merge(params, f"hcpn.{i}.", init_block(chans[i], rng, config.heads, config.reduction, config.fusion))
    for i in range(config.cascade_levels - 1):
        merge(params, f"carry.{i}.", init_carry(chans[i], chans[i + 1], rng))
    for l in range(1, bb.levels + 1):
        h, w, c = bb.level_shape(l)
        merge(params, f"gac.l{l}.", init_gac(2 * c, (h, w)))
    fine = 2 * chans[0] if config.fine_stage else None
    merge(params, "dec.", init_decoder([2 * c for c in chans], config.decoder_width, rng, config.aspp_dilations,
                                       fine_channels=fine))
    return params


def param_group(name: str) -> str:
    """``decoder`` for decoder tensors; everything else belongs to the encoder/bridge group."""
    return "decoder" if name.startswith("dec.") else "encoder"


class HCPNModel:
    """Parameters plus configuration, with a pair-wise forward pass."""

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: ModelConfig | None = None, seed: int = 0) -> "HCPNModel":
        config = config or ModelConfig()
        return cls(config, init_model_params(config, seed))

    def astype_precision(self) -> "HCPNModel":
        return HCPNModel(self.config, cast(self.params))

    def forward_joint(self, frame_k, frame_k1, flow_rgb) -> MaskBundle:
        """Predictions for a batch of pairs as one bundle of ``2N`` maps.

        Inputs are ``(N, h, w, 3)`` (or unbatched ``(h, w, 3)``); rows ``[0, N)``
        of the result belong to frame k, rows ``[N, 2N)`` to frame k+1.
        """
        cfg = self.config
        p = self.params
        inputs = [T.as_tensor(x) for x in (frame_k, frame_k1, flow_rgb)]
        if inputs[0].ndim == 3:
            inputs = [T.reshape(x, (1,) + x.shape) for x in inputs]
        h, w = inputs[0].shape[1:3]
        streams = encode_streams(*inputs, scope(p, "enc."), cfg.backbone,
                                 use_flow=cfg.use_flow, use_frames=cfg.use_frames)
        blocks, carry = split_blocks(p, cfg.cascade_levels)
        cascade = hcpn_cascade(streams, blocks, carry, cfg.cascade_options)
        bridged = []
        for l, (vk, vk1) in enumerate(zip(cascade.v_k, cascade.v_k1), start=1):
            v = T.concat([vk, vk1], axis=0)
            bridged.append(v if cfg.bypass_gac else gac_forward(v, scope(p, f"gac.l{l}.")))
        fine = None
        if cfg.fine_stage:
            s_k, s_mot, s_k1 = streams.stem
            fine = T.concat([T.concat([s_k, s_mot], axis=-1), T.concat([s_k1, s_mot], axis=-1)], axis=0)
        coarse, contours = decode_masks(bridged, scope(p, "dec."), (h, w), cfg.aspp_dilations, fine=fine)
        refined = coarse if cfg.bypass_mcr else mcr_refine(coarse, contours)
        return MaskBundle(coarse, contours, refined)

    def forward(self, frame_k, frame_k1, flow_rgb) -> tuple:
        """Two :class:`MaskBundle` objects (frame k, frame k+1) without ground truth."""
        joint = self.forward_joint(frame_k, frame_k1, flow_rgb)
        n = joint.coarse.shape[0] // 2

        def half(t, i):
            return T.take(t, i * n, (i + 1) * n)

        return tuple(
            MaskBundle(half(joint.coarse, i), [half(c, i) for c in joint.contours], half(joint.refined, i))
            for i in range(2)
        )

    def predict(self, frame_k, frame_k1, flow_rgb) -> tuple:
        """Refined probability maps ``(P_k, P_k1)`` as numpy arrays, no tape."""
        with T.no_tape():
            bk, bk1 = self.forward(frame_k, frame_k1, flow_rgb)
        return bk.refined.data, bk1.refined.data

