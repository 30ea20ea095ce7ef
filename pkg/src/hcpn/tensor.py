"""Dense tensors with a tape-based reverse-mode differentiation engine.

Feature maps are stored channels-last as ``(H, W, C)`` or batched
``(N, H, W, C)`` arrays. Every differentiable primitive records a node on the
active :class:`Tape`; :func:`backward` walks those nodes in reverse.

Element precision is a run-wide setting (32-bit by default, 64-bit for
verification) controlled with :func:`set_precision` or :func:`precision`.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, CorruptStateError, DimensionError

EPS = 1e-8

_DTYPES = {32: np.float32, 64: np.float64}


class _State:
    bits = 32
    tapes: list = []
    faults: dict = {}


def set_precision(bits: int) -> None:
    if bits not in _DTYPES:
        raise ContractError(f"precision must be 32 or 64, got {bits}")
    _State.bits = bits


def get_precision() -> int:
    return _State.bits


def get_dtype():
    return _DTYPES[_State.bits]


@contextlib.contextmanager
def precision(bits: int):
    """Temporarily switch the run-wide element precision."""
    old = _State.bits
    set_precision(bits)
    try:
        yield
    finally:
        _State.bits = old


@contextlib.contextmanager
def inject_fault(op: str, scale: float = 1.5):
    """Corrupt the backward rule of ``op`` by scaling its input gradients.

    Test harness hook: lets the gradient checker prove it catches a wrong rule.
    """
    _State.faults[op] = scale
    try:
        yield
    finally:
        _State.faults.pop(op, None)


class Tensor:
    """Immutable n-dimensional array that can participate in a tape."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=get_dtype())
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def check_finite(self) -> "Tensor":
        if not self.is_finite():
            raise CorruptStateError(f"tensor {self.name or ''} of shape {self.shape} holds NaN/Inf")
        return self

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(eq=False)
class Node:
    op: str
    out: Tensor
    inputs: tuple
    backward: Callable


@dataclass(eq=False)
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; operations on tensors that require gradients are
    appended in execution order, which is already a topological order.
    ``check_finite`` makes every recorded op raise on NaN/Inf output.
    """

    check_finite: bool = False
    nodes: list = field(default_factory=list)
    gradients: "Gradients | None" = None

    def __enter__(self):
        _State.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _State.tapes.remove(self)
        return False


@contextlib.contextmanager
def no_tape():
    """Evaluate without recording, even inside an active tape."""
    saved = _State.tapes
    _State.tapes = []
    try:
        yield
    finally:
        _State.tapes = saved


def _active_tape() -> Tape | None:
    return _State.tapes[-1] if _State.tapes else None


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    result = Tensor._wrap(out, needs and tape is not None)
    if tape is not None:
        if tape.check_finite and not np.all(np.isfinite(out)):
            raise CorruptStateError(f"non-finite output at node {len(tape.nodes)} (op '{op}')")
        if needs:
            tape.nodes.append(Node(op, result, tuple(inputs), backward))
    return result


class Gradients:
    """Mapping from tensors to gradient arrays produced by :func:`backward`.

    Tensors absent from the graph map to zeros of their own shape.
    """

    def __init__(self):
        self._store: dict[int, tuple[Tensor, np.ndarray]] = {}

    def _add(self, t: Tensor, g: np.ndarray) -> None:
        key = id(t)
        if key in self._store:
            self._store[key] = (t, self._store[key][1] + g)
        else:
            self._store[key] = (t, g)

    def __getitem__(self, t: Tensor) -> np.ndarray:
        hit = self._store.get(id(t))
        if hit is None:
            return np.zeros(t.shape, dtype=t.dtype)
        return hit[1]

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._store

    def get(self, t: Tensor):
        hit = self._store.get(id(t))
        return None if hit is None else hit[1]


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Populate gradients of ``loss`` with respect to every tensor on ``tape``."""
    if loss.size != 1 or loss.ndim != 0:
        raise ContractError(f"loss must be a scalar tensor, got shape {loss.shape}")
    if not any(n.out is loss for n in reversed(tape.nodes)):
        raise ContractError("loss was not produced on this tape")
    grads = Gradients()
    grads._add(loss, np.ones_like(loss.data))
    faults = _State.faults
    for node in reversed(tape.nodes):
        g = grads.get(node.out)
        if g is None:
            continue
        if node.out is not loss:
            # each output is produced exactly once, so its gradient is final here
            del grads._store[id(node.out)]
        in_grads = node.backward(g)
        scale = faults.get(node.op)
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if scale is not None:
                gi = gi * scale
            grads._add(inp, gi)
    tape.gradients = grads
    return grads


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Hadamard product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _record("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _record("div", out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", a.data * mask, (a,), lambda g: (g * mask,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient is zero where clamping is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    pick_a = a.data >= b.data
    return _record("maximum", np.where(pick_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


_ELEMENTWISE = {
    "add": add,
    "hadamard": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
}


def elementwise(v, op: str, other=None) -> Tensor:
    """Apply a named pointwise operation (``add``, ``hadamard``, ``sigmoid``, ``tanh``, ``relu``)."""
    if op not in _ELEMENTWISE:
        raise ContractError(f"unknown elementwise op {op!r}")
    fn = _ELEMENTWISE[op]
    if op in ("add", "hadamard"):
        if other is None:
            raise ContractError(f"{op} needs a second operand")
        return fn(v, other)
    return fn(v)


# ---------------------------------------------------------------- structural


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {tuple(shape)}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _record("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a) -> Tensor:
    """Transpose the two trailing axes (matrix transpose for batched matrices)."""
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", out, ts, bw)


def take(a, start: int, stop: int, axis: int = 0) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    a = as_tensor(a)
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _record("take", a.data[index], (a,), bw)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _record("sum", np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    out = np.mean(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape),)

    return _record("mean", np.asarray(out), (a,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the trailing two axes, batched over leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", out, (a, b), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = x - x.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def bw(g):
        gx = np.multiply(g, out, dtype=out.dtype)
        s = gx.sum(axis=axis, keepdims=True)
        gx -= out * s
        return (gx,)

    return _record("softmax", out, (a,), bw)


def softmax_axis(s, axis: str = "row") -> Tensor:
    """Row-wise or column-wise softmax of a (batched) matrix."""
    if axis == "row":
        return softmax(s, axis=-1)
    if axis == "col":
        return softmax(s, axis=-2)
    raise ContractError(f"axis must be 'row' or 'col', got {axis!r}")


# ---------------------------------------------------------------- convolution


def _as_batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected (H, W, C) or (N, H, W, C), got {x.shape}")
    return x, False


def conv2d(x, kernel, bias=None, stride: int = 1, dilation: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlate ``x`` (..., H, W, Cin) with ``kernel`` (k, k, Cin, Cout).

    No kernel flip. ``padding='same'`` zero-pads so stride-1 output keeps H, W.
    """
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    x, squeeze = _as_batched(x)
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"kernel extents must be odd, got {kernel.shape}")
    n, h, w, c = x.shape
    if c != cin:
        raise DimensionError(f"kernel expects {cin} input channels, input {x.shape} has {c}")
    d, s = dilation, stride
    if padding == "same":
        ph, pw = d * (kh - 1) // 2, d * (kw - 1) // 2
    elif padding == "valid":
        ph = pw = 0
        if d * (kh - 1) >= h or d * (kw - 1) >= w:
            raise DimensionError(f"dilated kernel {kernel.shape} (dilation {d}) exceeds input {x.shape}")
    else:
        raise ContractError(f"padding must be 'same' or 'valid', got {padding!r}")
    ho = (h + 2 * ph - d * (kh - 1) - 1) // s + 1
    wo = (w + 2 * pw - d * (kw - 1) - 1) // s + 1
    inputs = [x, kernel] + ([as_tensor(bias)] if bias is not None else [])

    if kh == 1 and kw == 1 and s == 1:
        flat = x.data.reshape(-1, cin)
        k2 = kernel.data.reshape(cin, cout)
        out = (flat @ k2).reshape(n, h, w, cout)
        if bias is not None:
            out = out + inputs[2].data

        def bw(g):
            g2 = g.reshape(-1, cout)
            gx = (g2 @ k2.T).reshape(x.shape)
            gk = (flat.T @ g2).reshape(kernel.shape)
            return (gx, gk) + ((g2.sum(axis=0),) if bias is not None else ())

    else:
        xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0))) if ph or pw else x.data
        taps = [(i, j) for i in range(kh) for j in range(kw)]
        cols = np.concatenate(
            [xp[:, i * d:i * d + s * (ho - 1) + 1:s, j * d:j * d + s * (wo - 1) + 1:s, :] for i, j in taps],
            axis=-1,
        ).reshape(-1, kh * kw * cin)
        k2 = kernel.data.reshape(kh * kw * cin, cout)
        out = (cols @ k2).reshape(n, ho, wo, cout)
        if bias is not None:
            out = out + inputs[2].data

        def bw(g):
            g2 = g.reshape(-1, cout)
            gk = (cols.T @ g2).reshape(kernel.shape)
            gcols = (g2 @ k2.T).reshape(n, ho, wo, kh * kw, cin)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for t, (i, j) in enumerate(taps):
                gxp[:, i * d:i * d + s * (ho - 1) + 1:s, j * d:j * d + s * (wo - 1) + 1:s, :] += gcols[:, :, :, t, :]
            gx = gxp[:, ph:ph + h, pw:pw + w, :]
            return (gx, gk) + ((g2.sum(axis=0),) if bias is not None else ())

    y = _record("conv2d", out, inputs, bw)
    return reshape(y, y.shape[1:]) if squeeze else y


# ---------------------------------------------------------------- pooling / resizing


def global_avg_pool(x) -> Tensor:
    """Per-channel spatial mean, keeping singleton spatial axes."""
    x = as_tensor(x)
    return mean(x, axis=(-3, -2), keepdims=True)


def avg_pool2(x) -> Tensor:
    """2x2 average pooling with stride 2 on (..., H, W, C)."""
    x = as_tensor(x)
    *lead, h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2 needs even spatial extents, got {x.shape}")
    r = reshape(x, tuple(lead) + (h // 2, 2, w // 2, 2, c))
    nl = len(lead)
    return mean(r, axis=(nl + 1, nl + 3))


def _interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def resize_bilinear(x, size: tuple[int, int]) -> Tensor:
    """Bilinear resize of (..., H, W, C) to ``size = (H', W')`` with corner alignment."""
    x = as_tensor(x)
    ho, wo = size
    if ho < 1 or wo < 1:
        raise DimensionError(f"resize target must be at least 1x1, got {size}")
    x4, squeeze = _as_batched(x)
    n, h, w, c = x4.shape
    if (h, w) == (ho, wo):
        return x
    ry = _interp_matrix(ho, h, x.dtype)
    rx = _interp_matrix(wo, w, x.dtype)
    tmp = np.matmul(ry, x4.data.reshape(n, h, w * c)).reshape(n * ho, w, c)
    out = np.matmul(rx, tmp).reshape(n, ho, wo, c)

    def bw(g):
        gt = np.matmul(rx.T, g.reshape(n * ho, wo, c)).reshape(n, ho, w * c)
        return (np.matmul(ry.T, gt).reshape(n, h, w, c),)

    y = _record("resize_bilinear", out, (x4,), bw)
    return reshape(y, y.shape[1:]) if squeeze else y


def reduce_resize(v, mode: str = "global_avg_pool", size: tuple[int, int] | None = None) -> Tensor:
    """``global_avg_pool`` to 1x1xC, or ``bilinear`` resize to ``size``."""
    if mode == "global_avg_pool":
        return global_avg_pool(v)
    if mode == "bilinear":
        if size is None:
            raise ContractError("bilinear mode needs a target size")
        return resize_bilinear(v, size)
    raise ContractError(f"unknown reduce_resize mode {mode!r}")


# ---------------------------------------------------------------- normalization


def normalize(v, mode: str = "l2_channel", eps: float = EPS) -> Tensor:
    """Divide by an L2 norm plus ``eps``.

    ``l2_channel``: each channel map by its spatial norm.
    ``channel_pos``: each position's channel vector by its norm.
    """
    v = as_tensor(v)
    if mode == "l2_channel":
        axes = (-3, -2)
    elif mode == "channel_pos":
        axes = (-1,)
    else:
        raise ContractError(f"unknown normalize mode {mode!r}")
    x = v.data
    norm = np.sqrt(np.sum(x * x, axis=axes, keepdims=True))
    den = norm + eps
    out = x / den

    def bw(g):
        proj = np.sum(g * x, axis=axes, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        coef = np.where(norm > 0, proj / (den * den * safe), 0.0)
        return (g / den - x * coef,)

    return _record(f"normalize_{mode}", out, (v,), bw)


# ---------------------------------------------------------------- gradient checking


def grad_check(fn: Callable[..., Tensor], inputs: Sequence, eps: float = 1e-5,
               max_elements: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn`` maps the input tensors to a scalar tensor. The check runs in 64-bit
    precision regardless of the run-wide setting. Relative error per element is
    ``|analytic - numeric| / max(1, |numeric|)``. ``max_elements`` caps the
    number of probed elements per input (sampled deterministically by ``seed``).
    """
    with precision(64):
        params = [Tensor(np.array(as_tensor(t).data, dtype=np.float64), requires_grad=True) for t in inputs]
        with Tape(check_finite=True) as tape:
            loss = fn(*params)
        grads = backward(tape, loss)
        rng = np.random.default_rng(seed)
        worst = 0.0
        with no_tape():
            for p in params:
                analytic = grads[p].reshape(-1)
                flat = p.data.reshape(-1)
                idx = np.arange(flat.size)
                if max_elements is not None and flat.size > max_elements:
                    idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
                for i in idx:
                    orig = flat[i]
                    flat[i] = orig + eps
                    up = fn(*params).item()
                    flat[i] = orig - eps
                    down = fn(*params).item()
                    flat[i] = orig
                    numeric = (up - down) / (2 * eps)
                    err = abs(analytic[i] - numeric) / max(1.0, abs(numeric))
                    worst = max(worst, err)
        return float(worst)
