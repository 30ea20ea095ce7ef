"""Finite-difference gradient checks over every differentiable module at small shapes."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .bridge import gac_forward, init_gac
from .coattention import CascadeOptions, hcpn_block, init_block
from .decoder import MaskBundle, contour_from_mask, decode_masks, init_decoder, mcr_refine, training_loss
from .encoder import BackboneConfig, encode_streams
from .encoder import init_params as init_encoder

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    module: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def _as_inputs(params: dict) -> tuple:
    names = sorted(params)
    return names, [params[k].data for k in names]


def _with_params(names, fn):
    """Adapt ``fn(params_dict, *rest)`` to ``grad_check``'s flat positional inputs."""
    def wrapped(*tensors):
        params = dict(zip(names, tensors[:len(names)]))
        return fn(params, *tensors[len(names):])
    return wrapped


def _weighted_sum(x, rng_seed):
    # a fixed random projection makes every output element matter to the scalar
    w = np.random.default_rng(rng_seed).standard_normal(x.shape)
    return T.tsum(T.mul(x, T.Tensor(w)))


def case_tensor_core(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 6, 6, 2))
    k = rng.standard_normal((3, 3, 2, 3)) * 0.5
    b = rng.standard_normal(3) * 0.1
    m = rng.standard_normal((3, 4))

    def fn(x, k, b, m):
        y = T.conv2d(x, k, b, dilation=2)
        y = T.add(T.relu(y), T.mul(T.tanh(y), 0.5))
        y = T.avg_pool2(y)
        y = T.resize_bilinear(y, (5, 4))
        s = T.softmax_axis(T.reshape(y, (20, 3)), "col")
        z = T.matmul(T.reshape(s, (5, 12)), T.reshape(T.concat([m, m], axis=0), (12, 2)))
        z = T.add(T.normalize(T.reshape(z, (1, 5, 1, 2)), "l2_channel"),
                  T.normalize(T.reshape(z, (1, 5, 1, 2)), "channel_pos"))
        z = T.sigmoid(T.sub(T.global_avg_pool(z), T.mean(T.exp(T.mul(z, 0.3)))))
        return T.add(T.tsum(T.log(T.clip(T.maximum(z, 0.2), 1e-3, 1.0))), _weighted_sum(T.div(y, 2.0), seed))

    return fn, [x, k, b, m]


def case_hcpn_block(seed):
    """One full block (both PCMs, CCM with GAF) at 8x8x4."""
    rng = np.random.default_rng(seed)
    params = init_block(4, seed, heads=2, reduction=2)
    names, values = _as_inputs(params)
    feats = [rng.standard_normal((1, 8, 8, 4)) for _ in range(3)]

    def fn(params, mk, n, mk1):
        outs = hcpn_block(mk, n, mk1, params, CascadeOptions())
        return T.add(_weighted_sum(T.concat([o for o in outs], axis=-1), seed), T.tsum(T.mul(outs[0], 0.1)))

    return _with_params(names, fn), values + feats


def case_gac(seed):
    rng = np.random.default_rng(seed)
    params = init_gac(6, (4, 4))
    params["wl"].data[:] = rng.standard_normal(6)
    params["b"].data[:] = rng.standard_normal(6) * 0.5
    names, values = _as_inputs(params)

    def fn(params, v):
        return _weighted_sum(gac_forward(v, params), seed)

    return _with_params(names, fn), values + [rng.standard_normal((4, 4, 6))]


def case_decoder_loss(seed):
    """Decoder with its full-resolution stage, contour restriction (flood fill frozen) and loss at 16x16."""
    rng = np.random.default_rng(seed)
    chans = (4, 8)
    params = init_decoder(list(chans), 4, seed, dilations=(1, 2), fine_channels=3)
    for k in params:
        if k.endswith(".b"):
            params[k].data[:] = rng.standard_normal(params[k].shape) * 0.1
    names, values = _as_inputs(params)
    feats = [rng.standard_normal((2, 8, 8, chans[0])), rng.standard_normal((2, 4, 4, chans[1])),
             rng.standard_normal((2, 16, 16, 3))]
    gm = np.zeros((2, 16, 16))
    gm[:, 4:11, 5:12] = 1
    gr = contour_from_mask(gm.astype(bool)).astype(float)

    def fn(params, f1, f2, fine):
        coarse, contours = decode_masks([f1, f2], params, (16, 16), dilations=(1, 2), fine=fine)
        refined = mcr_refine(coarse, contours)
        return training_loss(MaskBundle(coarse, contours, refined, gm, gr))

    return _with_params(names, fn), values + feats


def case_encoder(seed):
    rng = np.random.default_rng(seed)
    cfg = BackboneConfig(levels=2, channels_per_level=(2, 4), input_size=(8, 8))
    params = init_encoder(cfg, seed)
    names, values = _as_inputs(params)
    imgs = [rng.random((1, 8, 8, 3)) for _ in range(3)]

    def fn(params, a, b, c):
        s = encode_streams(a, b, c, params, cfg)
        return T.add(_weighted_sum(s.motion[-1], seed), _weighted_sum(s.appearance_k1[0], seed + 1))

    return _with_params(names, fn), values + imgs


SUITE = {
    "tensor_core": case_tensor_core,
    "encoder": case_encoder,
    "hcpn_block": case_hcpn_block,
    "bridge_gac": case_gac,
    "decoder_loss": case_decoder_loss,
}


def run_suite(seed: int = 0, modules=None, fault_op: str | None = None, fault_module: str | None = None,
              max_elements: int | None = None) -> list:
    """Check each module; ``fault_op`` scales that op's backward rule inside ``fault_module`` only
    (inside every module when ``fault_module`` is None)."""
    results = []
    for name in modules or SUITE:
        fn, inputs = SUITE[name](seed)
        start = time.perf_counter()
        if fault_op and fault_module in (None, name):
            with T.inject_fault(fault_op):
                err = T.grad_check(fn, inputs, max_elements=max_elements, seed=seed)
        else:
            err = T.grad_check(fn, inputs, max_elements=max_elements, seed=seed)
        results.append(CheckResult(name, err, time.perf_counter() - start))
    return results


def format_report(results: list) -> str:
    lines = [f"{r.module:<14} max_rel_err {r.max_rel_error:.3e}  {'PASS' if r.passed else 'FAIL'}  ({r.seconds:.1f}s)"
             for r in results]
    failed = [r.module for r in results if not r.passed]
    lines.append("all modules pass" if not failed else f"failed: {', '.join(failed)}")
    return "\n".join(lines)
