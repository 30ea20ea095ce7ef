import math

import numpy as np
import pytest

from hcpn import tensor as T
from hcpn.coattention import (CascadeOptions, ccm_forward, channel_attention, hcpn_block, hcpn_cascade, init_block,
                              init_carry, pcm_forward, soft_attention, split_blocks)
from hcpn.encoder import BackboneConfig, encode_streams
from hcpn.encoder import init_params as init_encoder
from hcpn.errors import ConfigurationError, DimensionError
from hcpn.params import merge


@pytest.fixture(autouse=True)
def f64():
    with T.precision(64):
        yield


def block(c=4, seed=0, heads=2, **kw):
    return init_block(c, seed, heads=heads, reduction=2, **kw)


def np_params(p):
    return {k: v.data for k, v in p.items()}


def sa_oracle(v, w, b):
    h, wd, c = v.shape
    logits = [[sum(v[y, x, k] * w[0, 0, k, 0] for k in range(c)) + b[0] for x in range(wd)] for y in range(h)]
    flat = [l for row in logits for l in row]
    mx = max(flat)
    z = sum(math.exp(l - mx) for l in flat)
    out = np.empty_like(v)
    for y in range(h):
        for x in range(wd):
            a = math.exp(logits[y][x] - mx) / z
            out[y, x] = v[y, x] * (1 + h * wd * a)
    return out


def pcm_oracle(m, n, p):
    """Quadratic-loop affinity and attention, written independently of the tensor engine."""
    m = sa_oracle(m, p["sa_app.w"], p["sa_app.b"])
    n = sa_oracle(n, p["sa_mot.w"], p["sa_mot.b"])
    h, w, c = m.shape
    P, Q = p["pcm.P"], p["pcm.Q"]
    heads, _, d = P.shape
    pos = [(y, x) for y in range(h) for x in range(w)]
    k = len(pos)
    S = np.zeros((k, k))
    for i, (yi, xi) in enumerate(pos):
        for j, (yj, xj) in enumerate(pos):
            total = 0.0
            for hh in range(heads):
                for dd in range(d):
                    pn = sum(P[hh, cc, dd] * n[yi, xi, cc] for cc in range(c))
                    qm = sum(Q[hh, cc, dd] * m[yj, xj, cc] for cc in range(c))
                    total += pn * qm
            S[i, j] = total / math.sqrt(d)
    rows = np.exp(S - S.max(axis=1, keepdims=True))
    rows /= rows.sum(axis=1, keepdims=True)
    cols = np.exp(S - S.max(axis=0, keepdims=True))
    cols /= cols.sum(axis=0, keepdims=True)
    m_hat, n_hat = np.zeros_like(m), np.zeros_like(n)
    for j, (yj, xj) in enumerate(pos):
        for i, (yi, xi) in enumerate(pos):
            m_hat[yj, xj] += rows[i, j] * m[yi, xi]
            n_hat[yj, xj] += cols[i, j] * n[yi, xi]
    return m_hat, n_hat


# ---------------------------------------------------------------- soft attention


def test_soft_attention_uniform_logits_doubles():
    v = np.random.default_rng(0).standard_normal((3, 4, 2))
    out = soft_attention(T.Tensor(v), T.Tensor(np.zeros((1, 1, 2, 1))), T.Tensor([0.3]))
    np.testing.assert_allclose(out.data, 2 * v, atol=1e-12)


def test_soft_attention_single_position():
    v = np.array([[[1.5, -2.0]]])
    out = soft_attention(T.Tensor(v), T.Tensor(np.ones((1, 1, 2, 1))), None)
    np.testing.assert_allclose(out.data, 2 * v)


def test_soft_attention_dominant_position():
    v = np.ones((2, 2, 1))
    v[0, 0, 0] = 101.0 / 100.0  # pushes that position's logit 100 above the rest after scaling below
    w = np.full((1, 1, 1, 1), 10000.0)
    out = soft_attention(T.Tensor(v), T.Tensor(w), T.Tensor([-10000.0])).data[..., 0]
    assert out[0, 0] == pytest.approx((1 + 4) * v[0, 0, 0])
    np.testing.assert_allclose(out.ravel()[1:], 1.0, rtol=1e-9)


# ---------------------------------------------------------------- PCM


def test_pcm_matches_bruteforce_oracle():
    rng = np.random.default_rng(1)
    worst = 0.0
    for trial in range(100):
        h = int(rng.integers(1, 5))
        w = int(rng.integers(1, 16 // h + 1))
        p = block(4, seed=trial)
        for k in ("sa_app.b", "sa_mot.b"):
            p[k].data[:] = rng.standard_normal(1)
        m, n = rng.standard_normal((h, w, 4)), rng.standard_normal((h, w, 4))
        mh, nh = pcm_forward(T.Tensor(m), T.Tensor(n), p)
        om, on = pcm_oracle(m, n, np_params(p))
        worst = max(worst, np.abs(mh.data - om).max(), np.abs(nh.data - on).max())
    assert worst < 1e-6


def test_pcm_degenerate_single_position():
    p = block()
    m, n = np.array([[[1.0, 2, 3, 4]]]), np.array([[[0.5, 0, -1, 2]]])
    mh, nh = pcm_forward(T.Tensor(m), T.Tensor(n), p, use_sa=False)
    np.testing.assert_allclose(mh.data, m)
    np.testing.assert_allclose(nh.data, n)


def test_pcm_constant_maps_are_fixed_points():
    p = block()
    m = np.broadcast_to([1.0, -2, 0.5, 3], (3, 3, 4)).copy()
    n = np.broadcast_to([0.1, 0.2, -0.3, 0.4], (3, 3, 4)).copy()
    mh, nh = pcm_forward(T.Tensor(m), T.Tensor(n), p, use_sa=False)
    np.testing.assert_allclose(mh.data, m, atol=1e-12)
    np.testing.assert_allclose(nh.data, n, atol=1e-12)


def test_pcm_permutation_equivariance():
    rng = np.random.default_rng(2)
    p = block(8, heads=4)
    h, w = 4, 5
    m, n = rng.standard_normal((h, w, 8)), rng.standard_normal((h, w, 8))
    mh, nh = pcm_forward(T.Tensor(m), T.Tensor(n), p)
    for _ in range(50):
        perm = rng.permutation(h * w)
        pm = m.reshape(-1, 8)[perm].reshape(h, w, 8)
        pn = n.reshape(-1, 8)[perm].reshape(h, w, 8)
        mh2, nh2 = pcm_forward(T.Tensor(pm), T.Tensor(pn), p)
        np.testing.assert_allclose(mh2.data.reshape(-1, 8), mh.data.reshape(-1, 8)[perm], atol=1e-6)
        np.testing.assert_allclose(nh2.data.reshape(-1, 8), nh.data.reshape(-1, 8)[perm], atol=1e-6)


def test_pcm_shape_mismatch():
    with pytest.raises(DimensionError):
        pcm_forward(T.Tensor(np.zeros((2, 2, 4))), T.Tensor(np.zeros((2, 3, 4))), block())


def test_block_rejects_bad_divisibility():
    with pytest.raises(ConfigurationError):
        init_block(6, 0, heads=4)
    with pytest.raises(ConfigurationError):
        init_block(8, 0, heads=4, reduction=3)


# ---------------------------------------------------------------- CCM


def test_ccm_convex_bounds():
    rng = np.random.default_rng(3)
    for trial in range(100):
        p = block(4, seed=trial)
        x, y = rng.standard_normal((1, 3, 3, 4)), rng.standard_normal((1, 3, 3, 4))
        a = channel_attention(T.Tensor(x), p).data
        b = channel_attention(T.Tensor(y), p).data
        out = ccm_forward(T.Tensor(x), T.Tensor(y), p).data
        assert np.all(out >= np.minimum(a, b) - 1e-12) and np.all(out <= np.maximum(a, b) + 1e-12)


def test_ccm_identical_inputs():
    p = block()
    x = T.Tensor(np.random.default_rng(4).standard_normal((3, 3, 4)))
    expect = channel_attention(T.reshape(x, (1, 3, 3, 4)), p).data[0]
    np.testing.assert_allclose(ccm_forward(x, x, p).data, expect)


def test_ccm_zero_gate_parameters_make_swap_symmetric():
    p = block()
    for k in p:
        if k.startswith("gaf."):
            p[k].data[:] = 0.0
    rng = np.random.default_rng(5)
    x, y = T.Tensor(rng.standard_normal((3, 3, 4))), T.Tensor(rng.standard_normal((3, 3, 4)))
    np.testing.assert_allclose(ccm_forward(x, y, p).data, ccm_forward(y, x, p).data, atol=1e-12)


def test_ccm_zero_inputs():
    z = T.Tensor(np.zeros((2, 2, 4)))
    for fusion in ("gaf", "add"):
        assert not ccm_forward(z, z, block(fusion=fusion), fusion).data.any()


def test_ccm_fusion_variants_shapes():
    x = T.Tensor(np.ones((1, 2, 2, 4)))
    for fusion in ("gaf", "add", "concat"):
        assert ccm_forward(x, x, block(fusion=fusion), fusion).shape == (1, 2, 2, 4)


# ---------------------------------------------------------------- block and cascade


def test_block_gradient_check():
    rng = np.random.default_rng(6)
    p = block(4)
    names = sorted(p)
    feats = [rng.standard_normal((1, 8, 8, 4)) for _ in range(3)]
    w = rng.standard_normal((1, 8, 8, 12))

    def fn(*ts):
        params = dict(zip(names, ts[:len(names)]))
        _, _, nh, nh2, npl = hcpn_block(*ts[len(names):], params)
        return T.tsum(T.mul(T.concat([nh, nh2, npl], axis=-1), T.Tensor(w)))

    assert T.grad_check(fn, [p[k].data for k in names] + feats) < 1e-4


def _cascade_setup(levels=4, chans=(4, 8, 12, 16), size=32, seed=0):
    cfg = BackboneConfig(levels=levels, channels_per_level=chans, input_size=(size, size))
    enc = init_encoder(cfg, seed)
    params = {}
    for i in range(levels):
        merge(params, f"hcpn.{i}.", init_block(chans[i], seed + i, heads=2, reduction=2))
    for i in range(levels - 1):
        merge(params, f"carry.{i}.", init_carry(chans[i], chans[i + 1], seed + 10 + i))
    return cfg, enc, params


def test_cascade_channel_counts_and_identical_frames():
    cfg, enc, params = _cascade_setup()
    rng = np.random.default_rng(7)
    frame = rng.random((1, 32, 32, 3))
    flow = rng.random((1, 32, 32, 3))
    streams = encode_streams(frame, frame, flow, enc, cfg)
    blocks, carry = split_blocks(params, 4)
    out = hcpn_cascade(streams, blocks, carry)
    assert [v.shape[-1] for v in out.v_k] == [8, 16, 24, 32]
    for a, b in zip(out.v_k, out.v_k1):
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)


def test_single_level_cascade_is_one_block():
    cfg, enc, params = _cascade_setup()
    rng = np.random.default_rng(8)
    streams = encode_streams(rng.random((1, 32, 32, 3)), rng.random((1, 32, 32, 3)), rng.random((1, 32, 32, 3)),
                             enc, cfg)
    blocks, carry = split_blocks(params, 1)
    out = hcpn_cascade(streams, blocks, carry)
    mk, n, mk1 = streams.level(1)
    _, _, nh, nh2, npl = hcpn_block(mk, n, mk1, blocks[0])
    np.testing.assert_allclose(out.v_k[0].data, T.concat([npl, nh], axis=-1).data)
    # deeper levels pass raw stream features
    mk4, n4, _ = streams.level(4)
    np.testing.assert_allclose(out.v_k[3].data, T.concat([n4, mk4], axis=-1).data)


def test_cascade_level_count_errors():
    cfg, enc, params = _cascade_setup()
    rng = np.random.default_rng(9)
    streams = encode_streams(*(rng.random((1, 32, 32, 3)) for _ in range(3)), enc, cfg)
    with pytest.raises(ConfigurationError):
        hcpn_cascade(streams, [], [])
    blocks, carry = split_blocks(params, 4)
    with pytest.raises(ConfigurationError):
        hcpn_cascade(streams, blocks + blocks[:1], carry)


def test_two_stream_and_bypass_options_run():
    cfg, enc, params = _cascade_setup()
    rng = np.random.default_rng(10)
    streams = encode_streams(*(rng.random((1, 32, 32, 3)) for _ in range(3)), enc, cfg)
    blocks, carry = split_blocks(params, 4)
    for opts in (CascadeOptions(two_stream=True), CascadeOptions(bypass_pcm=True), CascadeOptions(bypass_ccm=True)):
        out = hcpn_cascade(streams, blocks, carry, opts)
        assert all(np.isfinite(v.data).all() for v in out.v_k + out.v_k1)
