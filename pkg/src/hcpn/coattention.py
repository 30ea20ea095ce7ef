"""Co-attention blocks and their cascade over backbone levels.

One block holds two soft-attention units, the parallel co-attention module
(affinity between appearance and motion maps), and the cross co-attention
module that fuses the two frames' motion-attentive maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError
from .params import add_conv, add_linear, conv, linear, rng_from, scope, uniform

FUSIONS = ("gaf", "add", "concat")


def init_block(channels: int, seed, heads: int = 4, reduction: int = 4, fusion: str = "gaf") -> dict:
    """Parameters for one cascade level with ``channels`` feature channels."""
    if channels % heads:
        raise ConfigurationError(f"{channels} channels not divisible by {heads} heads")
    if channels % reduction:
        raise ConfigurationError(f"{channels} channels not divisible by reduction {reduction}")
    if fusion not in FUSIONS:
        raise ConfigurationError(f"fusion must be one of {FUSIONS}, got {fusion!r}")
    rng = rng_from(seed)
    c, d, r = channels, channels // heads, channels // reduction
    p = {}
    add_conv(p, rng, "sa_app", 1, c, 1)
    add_conv(p, rng, "sa_mot", 1, c, 1)
    p["pcm.P"] = T.Tensor(uniform(rng, (heads, c, d), c), requires_grad=True, name="pcm.P")
    p["pcm.Q"] = T.Tensor(uniform(rng, (heads, c, d), c), requires_grad=True, name="pcm.Q")
    add_linear(p, rng, "ca.reduce", c, r)
    add_linear(p, rng, "ca.expand", r, c)
    if fusion == "gaf":
        add_conv(p, rng, "gaf.global1", 1, c, r)
        add_conv(p, rng, "gaf.global2", 1, r, c)
        add_conv(p, rng, "gaf.local1", 1, c, r)
        add_conv(p, rng, "gaf.local2", 1, r, c)
    elif fusion == "concat":
        add_conv(p, rng, "fuse", 1, 2 * c, c)
    return p


def _batched(x: T.Tensor):
    x = T.as_tensor(x)
    if x.ndim == 3:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def soft_attention(v, sa_w, sa_b=None) -> T.Tensor:
    """Residual spatial attention ``V * (1 + W*H*softmax(logits))``.

    The logits come from a 1x1 convolution to a single channel; the softmax runs
    over all spatial positions, so an untrained unit is close to a constant 2x.
    """
    v, squeeze = _batched(v)
    n, h, w, c = v.shape
    logits = T.conv2d(v, sa_w, sa_b)
    a = T.softmax(T.reshape(logits, (n, h * w)), axis=-1)
    gate = T.add(T.mul(a, float(h * w)), 1.0)
    out = T.mul(v, T.reshape(gate, (n, h, w, 1)))
    return T.reshape(out, out.shape[1:]) if squeeze else out


def _heads_to_matrix(p: T.Tensor) -> T.Tensor:
    heads, c, d = p.shape
    return T.reshape(T.transpose(p, (1, 0, 2)), (c, heads * d))


def affinity(m_flat, n_flat, P, Q) -> T.Tensor:
    """``S[i, j] = sum_h (P_h^T n_i) . (Q_h^T m_j) / sqrt(C/h)``; rows index motion positions."""
    heads, c, d = P.shape
    np_ = T.matmul(n_flat, _heads_to_matrix(P))
    mq = T.matmul(m_flat, _heads_to_matrix(Q))
    return T.mul(T.matmul(np_, T.swap_last(mq)), 1.0 / np.sqrt(d))


def pcm_forward(m, n, params: dict, use_sa: bool = True):
    """Parallel co-attention of appearance ``m`` and motion ``n``.

    Both maps are ``(H, W, C)`` or ``(B, H, W, C)``. Returns ``(m_hat, n_hat)`` with
    ``m_hat = M softmax_rows(S)`` and ``n_hat = N softmax_cols(S)`` in the
    channels-by-positions layout.
    """
    m, squeeze = _batched(m)
    n, _ = _batched(n)
    if m.shape != n.shape:
        raise DimensionError(f"appearance {m.shape} and motion {n.shape} maps differ")
    if use_sa:
        m = soft_attention(m, params["sa_app.w"], params.get("sa_app.b"))
        n = soft_attention(n, params["sa_mot.w"], params.get("sa_mot.b"))
    b, h, w, c = m.shape
    mf = T.reshape(m, (b, h * w, c))
    nf = T.reshape(n, (b, h * w, c))
    s = affinity(mf, nf, params["pcm.P"], params["pcm.Q"])
    m_hat = T.matmul(T.swap_last(T.softmax_axis(s, "row")), mf)
    n_hat = T.matmul(T.swap_last(T.softmax_axis(s, "col")), nf)
    m_hat = T.reshape(m_hat, (b, h, w, c))
    n_hat = T.reshape(n_hat, (b, h, w, c))
    if squeeze:
        return T.reshape(m_hat, (h, w, c)), T.reshape(n_hat, (h, w, c))
    return m_hat, n_hat


def channel_attention(x, params: dict) -> T.Tensor:
    pooled = T.global_avg_pool(x)
    hidden = T.relu(linear(pooled, params, "ca.reduce"))
    return T.mul(x, T.sigmoid(linear(hidden, params, "ca.expand")))


def gaf_gate(u, params: dict) -> T.Tensor:
    """Per-position, per-channel gate from a pooled branch plus a full-resolution branch."""
    glob = conv(T.relu(conv(T.global_avg_pool(u), params, "gaf.global1")), params, "gaf.global2")
    loc = conv(T.relu(conv(u, params, "gaf.local1")), params, "gaf.local2")
    return T.sigmoid(T.add(loc, glob))


def ccm_forward(n_hat, n_hat2, params: dict, fusion: str = "gaf") -> T.Tensor:
    """Fuse two frames' motion-attentive maps into one.

    With ``fusion='gaf'`` the output is ``w*A + (1-w)*B`` where ``A``, ``B`` are the
    channel-attended inputs and ``w`` the sigmoid gate computed from ``A + B``.
    """
    n_hat, squeeze = _batched(n_hat)
    n_hat2, _ = _batched(n_hat2)
    if n_hat.shape != n_hat2.shape:
        raise DimensionError(f"cannot fuse maps of shapes {n_hat.shape} and {n_hat2.shape}")
    a = channel_attention(n_hat, params)
    b = channel_attention(n_hat2, params)
    if fusion == "gaf":
        w = gaf_gate(T.add(a, b), params)
        out = T.add(b, T.mul(w, T.sub(a, b)))
    elif fusion == "add":
        out = T.add(a, b)
    elif fusion == "concat":
        out = conv(T.concat([a, b], axis=-1), params, "fuse")
    else:
        raise ContractError(f"unknown fusion {fusion!r}")
    return T.reshape(out, out.shape[1:]) if squeeze else out


@dataclass(frozen=True)
class CascadeOptions:
    """Structural switches used by the ablation variants."""

    fusion: str = "gaf"
    bypass_pcm: bool = False
    bypass_ccm: bool = False
    two_stream: bool = False


@dataclass
class CascadeOutput:
    v_k: list = field(default_factory=list)
    v_k1: list = field(default_factory=list)
    n_plus: list = field(default_factory=list)


def init_carry(channels_from: int, channels_to: int, seed) -> dict:
    rng = rng_from(seed)
    p = {}
    add_conv(p, rng, "app", 1, channels_from, channels_to)
    add_conv(p, rng, "mot", 1, channels_from, channels_to)
    return p


def _carry(x, params: dict, name: str) -> T.Tensor:
    return conv(T.avg_pool2(x), params, name)


def hcpn_block(m_k, n, m_k1, params: dict, options: CascadeOptions = CascadeOptions()):
    """One cascade level. Returns ``(m_hat_k, m_hat_k1, n_hat, n_hat2, n_plus)``."""
    if m_k.shape != n.shape or m_k1.shape != n.shape:
        raise DimensionError(f"level inputs differ: {m_k.shape}, {n.shape}, {m_k1.shape}")
    bsz = m_k.shape[0]
    if options.bypass_pcm:
        m_hat, n_hat_both = T.concat([m_k, m_k1], axis=0), T.concat([n, n], axis=0)
    else:
        # both frames go through the same PCM parameters in one batched call
        m_hat, n_hat_both = pcm_forward(T.concat([m_k, m_k1], axis=0), T.concat([n, n], axis=0), params)
    m_hat_k, m_hat_k1 = T.take(m_hat, 0, bsz), T.take(m_hat, bsz, 2 * bsz)
    n_hat, n_hat2 = T.take(n_hat_both, 0, bsz), T.take(n_hat_both, bsz, 2 * bsz)
    if options.bypass_ccm:
        n_plus = T.mul(T.add(n_hat, n_hat2), 0.5)
    elif options.two_stream:
        # no cross-frame exchange: each frame keeps its own fused motion map
        return m_hat_k, m_hat_k1, n_hat, n_hat2, None
    else:
        n_plus = ccm_forward(n_hat, n_hat2, params, options.fusion)
    return m_hat_k, m_hat_k1, n_hat, n_hat2, n_plus


def hcpn_cascade(streams, blocks: list, carry: list, options: CascadeOptions = CascadeOptions()) -> CascadeOutput:
    """Run the co-attention cascade over the backbone levels.

    ``blocks[i]`` is applied at level ``i + 1``; ``carry[i]`` projects level
    ``i + 1`` outputs (2x average-pooled) into level ``i + 2`` inputs. Levels
    past the end of the cascade pass concatenated raw stream features.
    Feature maps must be batched ``(B, H, W, C)``.
    """
    levels = streams.levels
    if not 1 <= len(blocks) <= levels:
        raise ConfigurationError(f"{len(blocks)} co-attention blocks for a {levels}-level backbone")
    if len(carry) < len(blocks) - 1:
        raise ConfigurationError(f"{len(blocks)} blocks need {len(blocks) - 1} carry projections, got {len(carry)}")
    out = CascadeOutput()
    carry_mk = carry_mk1 = carry_n = None
    for l in range(1, levels + 1):
        o_k, o_f, o_k1 = streams.level(l)
        if o_k.ndim != 4:
            raise DimensionError(f"cascade expects batched maps, got {o_k.shape}")
        if l > len(blocks):
            out.v_k.append(T.concat([o_f, o_k], axis=-1))
            out.v_k1.append(T.concat([o_f, o_k1], axis=-1))
            out.n_plus.append(None)
            continue
        if carry_n is not None:
            o_k, o_k1, o_f = T.add(o_k, carry_mk), T.add(o_k1, carry_mk1), T.add(o_f, carry_n)
        m_hat_k, m_hat_k1, n_hat, n_hat2, n_plus = hcpn_block(o_k, o_f, o_k1, blocks[l - 1], options)
        if n_plus is None:
            out.v_k.append(T.concat([channel_attention(n_hat, blocks[l - 1]), n_hat], axis=-1))
            out.v_k1.append(T.concat([channel_attention(n_hat2, blocks[l - 1]), n_hat2], axis=-1))
            n_plus = T.mul(T.add(n_hat, n_hat2), 0.5)
        else:
            out.v_k.append(T.concat([n_plus, n_hat], axis=-1))
            out.v_k1.append(T.concat([n_plus, n_hat2], axis=-1))
        out.n_plus.append(n_plus)
        if l < len(blocks):
            cp = carry[l - 1]
            carry_mk = _carry(m_hat_k, cp, "app")
            carry_mk1 = _carry(m_hat_k1, cp, "app")
            carry_n = _carry(n_plus, cp, "mot")
    return out


def split_blocks(params: dict, count: int) -> tuple:
    """Pull ``hcpn.{i}.*`` and ``carry.{i}.*`` groups out of a flat parameter dict."""
    blocks = [scope(params, f"hcpn.{i}.") for i in range(count)]
    carry = [scope(params, f"carry.{i}.") for i in range(count - 1)]
    return blocks, carry
