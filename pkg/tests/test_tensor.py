import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hcpn import tensor as T
from hcpn.errors import ContractError, CorruptStateError, DimensionError


@pytest.fixture(autouse=True)
def float64():
    with T.precision(64):
        yield


def loop_matmul(a, b):
    m, k = len(a), len(a[0])
    n = len(b[0])
    return [[sum(a[i][t] * b[t][j] for t in range(k)) for j in range(n)] for i in range(m)]


def test_matmul_reference():
    a = [[1, 2], [3, 4]]
    b = [[5, 6], [7, 8]]
    assert loop_matmul(a, b) == [[19, 22], [43, 50]]
    np.testing.assert_array_equal(T.matmul(T.Tensor(a), T.Tensor(b)).data, [[19, 22], [43, 50]])


def test_matmul_identity_and_zero():
    a = np.random.default_rng(0).standard_normal((3, 3))
    np.testing.assert_array_equal(T.matmul(T.Tensor(a), T.Tensor(np.eye(3))).data, a)
    np.testing.assert_array_equal(T.matmul(T.Tensor(a), T.Tensor(np.zeros((3, 2)))).data, 0)


def test_matmul_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))


def test_matmul_associative():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b, c = (T.Tensor(rng.standard_normal((5, 5))) for _ in range(3))
        left = T.matmul(T.matmul(a, b), c).data
        right = T.matmul(a, T.matmul(b, c)).data
        assert np.max(np.abs(left - right) / np.maximum(1, np.abs(left))) < 1e-9


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_axis(T.Tensor([[0.0, 0.0]]), "row").data, [[0.5, 0.5]])
    np.testing.assert_allclose(T.softmax_axis(T.Tensor([[0.0, math.log(3)]]), "row").data, [[0.25, 0.75]])
    s = np.random.default_rng(2).standard_normal((4, 4))
    col = T.softmax_axis(T.Tensor(s), "col").data
    np.testing.assert_allclose(col.sum(axis=0), 1.0, atol=1e-6)


def test_softmax_survives_huge_logits():
    out = T.softmax(T.Tensor([[1000.0, 0.0, -1000.0]])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[1.0, 0.0, 0.0]], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-30, 30)), st.floats(-50, 50), st.sampled_from(["row", "col"]))
def test_softmax_sums_to_one_and_is_shift_invariant(s, c, axis):
    ax = -1 if axis == "row" else -2
    out = T.softmax_axis(T.Tensor(s), axis).data
    np.testing.assert_allclose(out.sum(axis=ax), 1.0, atol=1e-6)
    assert np.all(out > 0)
    shifted = T.softmax_axis(T.Tensor(s + c), axis).data
    assert np.max(np.abs(out - shifted)) < 1e-7


def test_conv2d_identity_kernel():
    x = np.random.default_rng(3).random((5, 6, 1))
    out = T.conv2d(T.Tensor(x), T.Tensor(np.ones((1, 1, 1, 1)))).data
    np.testing.assert_array_equal(out, x)


def test_conv2d_box_filter_on_constant():
    x = np.full((6, 6, 1), 2.5)
    out = T.conv2d(T.Tensor(x), T.Tensor(np.full((3, 3, 1, 1), 1 / 9))).data[..., 0]
    np.testing.assert_allclose(out[1:-1, 1:-1], 2.5)
    np.testing.assert_allclose(out[0, 0], 2.5 * 4 / 9)
    np.testing.assert_allclose(out[0, 2], 2.5 * 6 / 9)


# nested-loop oracle, frozen: input arange(16) as 4x4, Sobel-x kernel, same padding
SOBEL_REFERENCE = [
    [-7.0, -6.0, -6.0, 10.0],
    [-20.0, -8.0, -8.0, 24.0],
    [-36.0, -8.0, -8.0, 40.0],
    [-35.0, -6.0, -6.0, 38.0],
]


def test_conv2d_reference_table():
    x = np.arange(16.0).reshape(4, 4, 1)
    k = np.array([[1, 0, -1], [2, 0, -2], [1, 0, -1]], dtype=float).reshape(3, 3, 1, 1)
    out = T.conv2d(T.Tensor(x), T.Tensor(k)).data[..., 0]
    np.testing.assert_array_equal(out, SOBEL_REFERENCE)


def test_conv2d_valid_stride_dilation_shapes():
    x = T.Tensor(np.ones((2, 9, 9, 3)))
    k = T.Tensor(np.ones((3, 3, 3, 4)))
    assert T.conv2d(x, k, padding="valid").shape == (2, 7, 7, 4)
    assert T.conv2d(x, k, padding="valid", dilation=2).shape == (2, 5, 5, 4)
    assert T.conv2d(T.Tensor(np.ones((1, 8, 8, 3))), k, stride=2).shape == (1, 4, 4, 4)
    with pytest.raises(DimensionError):
        T.conv2d(x, k, padding="valid", dilation=5)


def test_conv2d_channel_mismatch():
    with pytest.raises(DimensionError, match="channels"):
        T.conv2d(T.Tensor(np.ones((4, 4, 2))), T.Tensor(np.ones((3, 3, 3, 1))))


def test_global_avg_pool_of_constant():
    x = np.stack([np.full((5, 7), 1.5), np.full((5, 7), -2.0)], axis=-1)
    np.testing.assert_allclose(T.reduce_resize(T.Tensor(x)).data.reshape(-1), [1.5, -2.0])


def test_bilinear_identity_and_reference():
    x = T.Tensor(np.random.default_rng(4).random((3, 4, 2)))
    np.testing.assert_array_equal(T.reduce_resize(x, "bilinear", (3, 4)).data, x.data)
    g = T.Tensor(np.array([[0.0, 1.0], [2.0, 3.0]]).reshape(2, 2, 1))
    out = T.reduce_resize(g, "bilinear", (3, 3)).data[..., 0]
    np.testing.assert_allclose(out, [[0.0, 0.5, 1.0], [1.0, 1.5, 2.0], [2.0, 2.5, 3.0]])
    with pytest.raises(DimensionError):
        T.resize_bilinear(g, (0, 3))


def test_bilinear_exact_on_affine_images():
    yy, xx = np.mgrid[0:5, 0:7].astype(float)
    img = (0.3 * yy - 1.2 * xx + 2.0)[..., None]
    out = T.resize_bilinear(T.Tensor(img), (9, 13)).data[..., 0]
    ys, xs = np.meshgrid(np.linspace(0, 4, 9), np.linspace(0, 6, 13), indexing="ij")
    np.testing.assert_allclose(out, 0.3 * ys - 1.2 * xs + 2.0, atol=1e-12)


def test_normalize_examples():
    np.testing.assert_array_equal(T.normalize(T.Tensor(np.zeros((2, 2, 3)))).data, 0)
    out = T.normalize(T.Tensor(np.array([3.0, 4.0]).reshape(1, 2, 1)), "l2_channel").data
    np.testing.assert_allclose(out.reshape(-1), [0.6, 0.8], atol=1e-8)
    v = np.random.default_rng(5).standard_normal((4, 4, 3))
    norms = np.linalg.norm(T.normalize(T.Tensor(v), "channel_pos").data, axis=-1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4, 5), elements=st.floats(-10, 10)), st.sets(st.integers(0, 4)))
def test_l2_channel_norms_are_unit_or_zero(v, zero_channels):
    v = v.copy()
    for c in zero_channels:
        v[..., c] = 0.0
    out = T.normalize(T.Tensor(v), "l2_channel").data
    norms = np.sqrt((out ** 2).sum(axis=(0, 1)))
    for c in range(5):
        if not np.any(v[..., c]):
            assert norms[c] == 0.0
        elif np.linalg.norm(v[..., c]) > 1e-3:
            assert abs(norms[c] - 1.0) < 1e-6


def test_elementwise_examples():
    np.testing.assert_array_equal(T.elementwise(T.Tensor(np.zeros((2, 2, 1))), "sigmoid").data, 0.5)
    v = np.random.default_rng(6).random((3, 3, 2))
    np.testing.assert_array_equal(T.elementwise(T.Tensor(v), "hadamard", T.Tensor(np.ones_like(v))).data, v)
    # 0.76159... from (e^2-1)/(e^2+1) with e summed as a power series
    np.testing.assert_allclose(T.elementwise(T.Tensor([-1.0, 0.0, 1.0]), "tanh").data,
                               [-0.761594, 0.0, 0.761594], atol=1e-4)
    assert T.relu(T.Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_elementwise_broadcast_rules():
    v = T.Tensor(np.ones((4, 4, 3)))
    assert T.elementwise(v, "add", T.Tensor(np.ones((1, 1, 3)))).shape == (4, 4, 3)
    with pytest.raises(DimensionError):
        T.elementwise(v, "add", T.Tensor(np.ones((1, 1, 2))))


def test_backward_examples():
    w = T.Tensor(np.random.default_rng(7).random((3, 2)), requires_grad=True)
    with T.Tape() as tape:
        loss = T.tsum(w)
    np.testing.assert_array_equal(T.backward(tape, loss)[w], np.ones((3, 2)))

    a = T.Tensor(np.random.default_rng(8).random((2, 5)), requires_grad=True)
    with T.Tape() as tape:
        loss = T.tsum(a * a)
    np.testing.assert_allclose(T.backward(tape, loss)[a], 2 * a.data)


def test_backward_seed_and_unused_parameter():
    a = T.Tensor([1.0, 2.0], requires_grad=True)
    unused = T.Tensor(np.ones((2, 2)), requires_grad=True)
    with T.Tape() as tape:
        loss = T.tsum(T.exp(a))
    grads = T.backward(tape, loss)
    assert grads[loss] == 1.0
    assert grads[unused].shape == (2, 2)
    assert np.all(grads[unused] == 0.0)


def test_backward_rejects_non_scalar():
    a = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        y = a * 2.0
    with pytest.raises(ContractError):
        T.backward(tape, y)


def test_tape_records_in_topological_order():
    a = T.Tensor([1.0, 2.0], requires_grad=True)
    with T.Tape() as tape:
        b = T.exp(a)
        c = T.mul(b, a)
        T.tsum(c)
    seen = {id(a)}
    for node in tape.nodes:
        assert all(id(i) in seen or not i.requires_grad for i in node.inputs)
        seen.add(id(node.out))


def test_grad_check_quadratic():
    x = np.random.default_rng(9).standard_normal(6)
    assert T.grad_check(lambda t: T.tsum(t * t), [x]) < 1e-9


def test_grad_check_softmax_sum_of_squares():
    x = np.random.default_rng(10).standard_normal((4, 4))
    err = T.grad_check(lambda t: T.tsum(T.softmax_axis(t, "col") * T.softmax_axis(t, "col")), [x])
    assert err < 1e-6


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_reports_corrupt_node():
    with pytest.raises(CorruptStateError, match="log"):
        T.grad_check(lambda t: T.tsum(T.log(t)), [np.array([1.0, -1.0])])


def test_fault_injection_is_detected():
    x = np.random.default_rng(11).standard_normal(5)
    with T.inject_fault("tanh"):
        assert T.grad_check(lambda t: T.tsum(T.tanh(t)), [x]) > 1e-2
    assert T.grad_check(lambda t: T.tsum(T.tanh(t)), [x]) < 1e-9


RNG = np.random.default_rng(12)
OP_CASES = {
    "add_broadcast": (lambda a, b: T.tsum(T.sigmoid(a + b)), [RNG.standard_normal((3, 3, 2)), RNG.standard_normal((1, 1, 2))]),
    "sub_div": (lambda a, b: T.tsum((a - b) / (b * b + 1.0)), [RNG.standard_normal((2, 3)), RNG.standard_normal((2, 3))]),
    "matmul": (lambda a, b: T.tsum(T.tanh(T.matmul(a, b))), [RNG.standard_normal((2, 3, 4)), RNG.standard_normal((4, 2))]),
    "softmax_row": (lambda a: T.tsum(T.softmax_axis(a, "row") * a), [RNG.standard_normal((3, 5))]),
    "conv_same": (lambda x, k: T.tsum(T.tanh(T.conv2d(x, k))), [RNG.standard_normal((5, 5, 2)), RNG.standard_normal((3, 3, 2, 3))]),
    "conv_stride_dilate": (lambda x, k, b: T.tsum(T.tanh(T.conv2d(x, k, b, stride=2, dilation=2))),
                           [RNG.standard_normal((1, 8, 8, 2)), RNG.standard_normal((3, 3, 2, 2)), RNG.standard_normal(2)]),
    "conv_1x1": (lambda x, k, b: T.tsum(T.tanh(T.conv2d(x, k, b))), [RNG.standard_normal((4, 4, 3)), RNG.standard_normal((1, 1, 3, 2)), RNG.standard_normal(2)]),
    "gap": (lambda x: T.tsum(T.tanh(T.global_avg_pool(x)) * 3.0), [RNG.standard_normal((4, 5, 3))]),
    "bilinear": (lambda x: T.tsum(T.tanh(T.resize_bilinear(x, (7, 5)))), [RNG.standard_normal((4, 3, 2))]),
    "avg_pool2": (lambda x: T.tsum(T.tanh(T.avg_pool2(x))), [RNG.standard_normal((1, 4, 6, 2))]),
    "l2_channel": (lambda x: T.tsum(T.normalize(x, "l2_channel") * T.Tensor(np.arange(24.0).reshape(2, 4, 3))), [RNG.standard_normal((2, 4, 3))]),
    "channel_pos": (lambda x: T.tsum(T.normalize(x, "channel_pos") * T.Tensor(np.arange(24.0).reshape(2, 4, 3))), [RNG.standard_normal((2, 4, 3))]),
    "relu_concat": (lambda a, b: T.tsum(T.relu(T.concat([a, b], axis=-1)) * 2.0), [RNG.standard_normal((3, 2)) + 0.05, RNG.standard_normal((3, 1)) + 0.05]),
    "log_clip_maximum": (lambda a, b: T.tsum(T.log(T.clip(T.maximum(a, b), 1e-3, 10.0))), [RNG.random((3, 3)) + 0.1, RNG.random((3, 3)) + 0.1]),
    "mean_transpose": (lambda a: T.mean(T.tanh(T.transpose(a, (1, 0, 2))) * 5.0, axis=(0, 2)).sum(), [RNG.standard_normal((2, 3, 4))]),
}


@pytest.mark.parametrize("case", sorted(OP_CASES))
def test_grad_check_every_op(case):
    fn, inputs = OP_CASES[case]
    assert T.grad_check(fn, inputs) < 1e-4


def test_precision_is_run_wide():
    with T.precision(32):
        assert T.Tensor([1.0]).dtype == np.float32
    assert T.Tensor([1.0]).dtype == np.float64
    with pytest.raises(ContractError):
        T.set_precision(16)
