"""
Co-attention and the evaluation triple
======================================

Parallel co-attention mixes every position of one map into every position of
the other. Reordering positions reorders the output the same way, which is
easy to check numerically. The second half scores a few hand-made masks with
region similarity J, boundary F and temporal stability T.
"""

import numpy as np

from hcpn import tensor as T
from hcpn.coattention import ccm_forward, init_block, pcm_forward
from hcpn.metrics import boundary_measure, region_similarity, temporal_stability

rng = np.random.default_rng(0)
params = init_block(8, seed=0, heads=2, reduction=2)
m = rng.standard_normal((4, 4, 8))  # appearance features
n = rng.standard_normal((4, 4, 8))  # motion features

with T.precision(64):
    m_hat, n_hat = pcm_forward(T.Tensor(m), T.Tensor(n), params)
    perm = rng.permutation(16)
    m_p, n_p = (x.reshape(16, 8)[perm].reshape(4, 4, 8) for x in (m, n))
    m_hat_p, _ = pcm_forward(T.Tensor(m_p), T.Tensor(n_p), params)
    drift = np.abs(m_hat_p.data.reshape(16, 8) - m_hat.data.reshape(16, 8)[perm]).max()
    print(f"permutation equivariance error {drift:.1e}")

    # Cross co-attention blends the two frames' maps with a gate in (0, 1).
    fused = ccm_forward(n_hat, T.Tensor(rng.standard_normal((4, 4, 8))), params)
    print("fused map shape:", fused.shape)


def square(x, y=8, s=10, size=32):
    out = np.zeros((size, size), bool)
    out[y:y + s, x:x + s] = True
    return out


gt = square(8)
for shift in (0, 1, 2, 5):
    pred = square(8 + shift)
    print(f"shift {shift}px: J {region_similarity(pred, gt):.3f}  F {boundary_measure(pred, gt):.3f}")

# T compares each mask, carried forward by the flow, with the next mask.
moving = [square(4 + 2 * t) for t in range(4)]
flow = np.zeros((32, 32, 2))
flow[..., 0] = 2.0
print("T with matching flow:", temporal_stability(moving, [flow] * 3))
print("T against zero flow:", round(temporal_stability(moving, [np.zeros_like(flow)] * 3), 4))
