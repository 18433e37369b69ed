"""Dense tensors with a dynamic reverse-mode tape.

Every differentiable op records a node on a thread-local tape when at
least one input requires a gradient. :func:`backward` replays the tape in
reverse recording order and clears it. Storage is a numpy array; the
default element type is float32 and can be switched to float64 with
:func:`precision` (all gradient checks run in 64-bit).
"""

from __future__ import annotations

import builtins
import contextlib
import functools
import threading
from typing import Callable, Sequence

import numpy as np

from . import kernels


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible for an op."""


_DTYPES = {"f32": np.float32, "f64": np.float64}
_default_dtype = np.float32
_local = threading.local()
# op names whose backward rule is deliberately corrupted (gradcheck fault injection)
_FAULTY_OPS: set[str] = set()


def get_default_dtype():
    return _default_dtype


@contextlib.contextmanager
def precision(name: str):
    """Temporarily set the storage precision for new tensors ("f32" or "f64")."""
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    prev = _default_dtype
    _default_dtype = _DTYPES[name]
    try:
        yield
    finally:
        _default_dtype = prev


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextlib.contextmanager
def inject_backward_fault(*op_names: str):
    """Scale the gradients produced by the named ops' backward rules by 1.5."""
    _FAULTY_OPS.update(op_names)
    try:
        yield
    finally:
        _FAULTY_OPS.difference_update(op_names)


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


def _tape() -> list:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = []
    return tape


def tape_length() -> int:
    return len(_tape())


def clear_tape() -> None:
    _tape().clear()


class _Node:
    __slots__ = ("name", "out", "inputs", "backward")

    def __init__(self, name, out, inputs, backward):
        self.name = name
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """A dense real array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_leaf")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _default_dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self._leaf = True

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scalar_mul(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scalar_mul(self, 1.0 / other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _make(name: str, data: np.ndarray, inputs: Sequence[Tensor], bw: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._leaf = False
    out.requires_grad = _grad_enabled() and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        _tape().append(_Node(name, out, tuple(inputs), bw))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that ``loss`` depends on, then clear the tape.

    Leaf gradients accumulate across calls until reset with ``zero_grad``.
    """
    if loss.data.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss was not produced by recorded ops")
    tape = _tape()
    loss.grad = np.ones_like(loss.data)
    try:
        for node in reversed(tape):
            g = node.out.grad
            if g is None:
                continue
            grads = node.backward(g)
            if node.name in _FAULTY_OPS:
                grads = tuple(None if gi is None else gi * 1.5 for gi in grads)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.asarray(gi, dtype=inp.data.dtype)
                else:
                    inp.grad = inp.grad + gi
            node.out.grad = None
    finally:
        tape.clear()


# ---------------------------------------------------------------------------
# elementwise


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=like.data.dtype)


def _broadcast_view(a_shape: tuple, b_shape: tuple):
    """Return the shape ``b`` must be viewed as to combine with ``a``, or raise.

    Allowed: equal shapes, ``b`` equal to ``a`` with a run of trailing size-1
    axes, or an ``[N,C]`` score against an ``[N,C,H,W]`` map.
    """
    if a_shape == b_shape:
        return b_shape
    if len(b_shape) == 2 and len(a_shape) == 4 and b_shape == a_shape[:2]:
        return b_shape + (1, 1)
    if len(b_shape) == len(a_shape):
        k = len(b_shape)
        while k > 0 and b_shape[k - 1] == 1:
            k -= 1
        if b_shape[:k] == a_shape[:k]:
            return b_shape
    if b_shape == () or b_shape == (1,):
        return b_shape
    raise DimensionError(f"cannot broadcast {b_shape} against {a_shape}")


def _reduce_to(g: np.ndarray, view: tuple, shape: tuple) -> np.ndarray:
    if g.shape == view:
        return g.reshape(shape)
    if len(view) < g.ndim:
        return np.asarray(g.sum()).reshape(shape)
    axes = tuple(i for i, v in enumerate(view) if v == 1 and g.shape[i] != 1)
    return g.sum(axis=axes, keepdims=True).reshape(shape)


def _binary(name, a: Tensor, b, fwd, grad_a, grad_b) -> Tensor:
    b = _as_tensor(b, a)
    view = _broadcast_view(a.shape, b.shape)
    bv = b.data.reshape(view)
    out = fwd(a.data, bv)

    def bw(g):
        ga = grad_a(g, a.data, bv) if a.requires_grad else None
        gb = _reduce_to(grad_b(g, a.data, bv), view, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(name, out, (a, b), bw)


def add(a: Tensor, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y: g, lambda g, x, y: g)


def sub(a: Tensor, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y: g, lambda g, x, y: -g)


def mul(a: Tensor, b) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, x, y: g * y, lambda g, x, y: g * x)


def div(a: Tensor, b) -> Tensor:
    return _binary(
        "div", a, b, np.divide,
        lambda g, x, y: g / y,
        lambda g, x, y: -g * x / (y * y),
    )


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make("scalar_mul", a.data * a.data.dtype.type(s), (a,), lambda g: (g * s,))


def sigmoid(a: Tensor) -> Tensor:
    e = np.exp(-np.abs(a.data))
    y = np.where(a.data >= 0, 1.0, e) / (1.0 + e)
    return _make("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", a.data * mask, (a,), lambda g: (g * mask,))


def broadcast_mul_channel(x: Tensor, s: Tensor) -> Tensor:
    """``out[n,c,h,w] = x[n,c,h,w] * s[n,c]``."""
    if x.ndim != 4 or s.shape != x.shape[:2]:
        raise DimensionError(f"channel scores {s.shape} do not match features {x.shape}")
    sv = s.data[:, :, None, None]
    out = x.data * sv

    def bw(g):
        gx = g * sv if x.requires_grad else None
        gs = np.einsum("nchw,nchw->nc", g, x.data) if s.requires_grad else None
        return gx, gs

    return _make("broadcast_mul_channel", out, (x, s), bw)


def broadcast_mul_spatial(x: Tensor, m: Tensor) -> Tensor:
    """``out[n,c,h,w] = x[n,c,h,w] * m[n,0,h,w]``."""
    if x.ndim != 4 or m.shape != (x.shape[0], 1) + x.shape[2:]:
        raise DimensionError(f"spatial map {m.shape} does not match features {x.shape}")
    out = x.data * m.data

    def bw(g):
        gx = g * m.data if x.requires_grad else None
        gm = np.sum(g * x.data, axis=1, keepdims=True) if m.requires_grad else None
        return gx, gm

    return _make("broadcast_mul_spatial", out, (x, m), bw)


# ---------------------------------------------------------------------------
# shape ops and reductions


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return _make("transpose", np.ascontiguousarray(np.swapaxes(x.data, -1, -2)), (x,),
                 lambda g: (np.swapaxes(g, -1, -2),))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(out, dtype=x.data.dtype), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scalar_mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    ref = xs[0].shape
    for t in xs:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise DimensionError(f"cannot concatenate {t.shape} with {ref}")
    sizes = [t.shape[1] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _make("concat_channels", np.concatenate([t.data for t in xs], axis=1), tuple(xs), bw)


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _make("channel_slice", x.data[:, start:stop].copy(), (x,), bw)


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    if builtins.sum(sizes) != x.shape[1]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover {x.shape[1]} channels")
    out, start = [], 0
    for s in sizes:
        out.append(channel_slice(x, start, start + s))
        start += s
    return out


# ---------------------------------------------------------------------------
# linear algebra and convolutions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; an optional shared leading batch axis."""
    if a.ndim not in (2, 3) or a.ndim != b.ndim:
        raise DimensionError(f"matmul expects matching 2-D or 3-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x[N,Cin] @ w[Cout,Cin].T + b[Cout]``."""
    if x.ndim != 2 or w.shape[1] != x.shape[1] or b.shape != (w.shape[0],):
        raise DimensionError(f"linear: x {x.shape}, w {w.shape}, b {b.shape}")
    out = x.data @ w.data.T + b.data

    def bw(g):
        return (
            g @ w.data if x.requires_grad else None,
            g.T @ x.data if w.requires_grad else None,
            g.sum(axis=0) if b.requires_grad else None,
        )

    return _make("linear", out, (x, w, b), bw)


def conv2d_pointwise(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """1x1 convolution: ``w[Cout,Cin]`` applied at every pixel, plus ``bias[Cout]``."""
    if x.ndim != 4 or w.ndim != 2 or w.shape[1] != x.shape[1] or bias.shape != (w.shape[0],):
        raise DimensionError(f"pointwise conv: x {x.shape}, w {w.shape}, bias {bias.shape}")
    n, c, h, wd = x.shape
    xf = x.data.reshape(n, c, h * wd)
    out = np.matmul(w.data, xf) + bias.data[None, :, None]

    def bw(g):
        gf = g.reshape(n, w.shape[0], h * wd)
        gx = np.matmul(w.data.T, gf).reshape(x.shape) if x.requires_grad else None
        gw = np.einsum("nop,ncp->oc", gf, xf) if w.requires_grad else None
        gb = gf.sum(axis=(0, 2)) if bias.requires_grad else None
        return gx, gw, gb

    return _make("conv2d_pointwise", out.reshape(n, w.shape[0], h, wd), (x, w, bias), bw)


def conv2d_depthwise(x: Tensor, w: Tensor, bias: Tensor | None = None, dilation: int = 1) -> Tensor:
    """Per-channel ``k x k`` correlation with zero "same" padding ``dilation*(k-1)/2``."""
    if w.ndim != 3 or w.shape[1] != w.shape[2]:
        raise DimensionError(f"depthwise kernel must be [C,k,k], got {w.shape}")
    k = w.shape[1]
    if k % 2 == 0:
        raise DimensionError(f"kernel size must be odd, got {k}")
    if x.ndim != 4 or w.shape[0] != x.shape[1]:
        raise DimensionError(f"depthwise conv: x {x.shape}, w {w.shape}")
    out = kernels.dwconv_forward(x.data, w.data, dilation)
    inputs = (x, w)
    if bias is not None:
        if bias.shape != (x.shape[1],):
            raise DimensionError(f"bias {bias.shape} for {x.shape[1]} channels")
        out += bias.data[None, :, None, None]
        inputs = (x, w, bias)

    def bw(g):
        if x.requires_grad or w.requires_grad:
            gx, gw = kernels.dwconv_backward(x.data, w.data, g, dilation)
        else:
            gx = gw = None
        grads = (gx if x.requires_grad else None, gw if w.requires_grad else None)
        if bias is not None:
            grads += (g.sum(axis=(0, 2, 3)) if bias.requires_grad else None,)
        return grads

    return _make("conv2d_depthwise", out, inputs, bw)


def weighted_spatial_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """``out[n,c] = sum_hw x[n,c,h,w] * weights[c,h,w]`` for constant weights."""
    if x.ndim != 4 or weights.shape != x.shape[1:]:
        raise DimensionError(f"weights {weights.shape} do not match features {x.shape}")
    wt = weights.astype(x.data.dtype, copy=False)
    out = np.einsum("nchw,chw->nc", x.data, wt)
    return _make("weighted_spatial_sum", out, (x,), lambda g: (g[:, :, None, None] * wt,))


# ---------------------------------------------------------------------------
# resampling


@functools.lru_cache(maxsize=256)
def _pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    m.setflags(write=False)
    return m


@functools.lru_cache(maxsize=256)
def _bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    # align_corners=False: src = (dst + 0.5) * in/out - 0.5, clamped at the borders
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        lo = min(int(np.floor(src)), n_in - 1)
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    m.setflags(write=False)
    return m


def _separable(name: str, x: Tensor, mh: np.ndarray, mw: np.ndarray) -> Tensor:
    mh = mh.astype(x.data.dtype)
    mw = mw.astype(x.data.dtype)
    out = np.matmul(np.matmul(mh, x.data), mw.T)
    return _make(name, out, (x,), lambda g: (np.matmul(mh.T, np.matmul(g, mw)),))


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Mean over windows ``floor(i*H/H')..ceil((i+1)*H/H')`` along each spatial axis."""
    h, w = x.shape[-2:]
    if out_h > h or out_w > w or out_h < 1 or out_w < 1:
        raise DimensionError(f"cannot pool {h}x{w} to {out_h}x{out_w}")
    return _separable("adaptive_avg_pool", x, _pool_matrix(h, out_h), _pool_matrix(w, out_w))


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    h, w = x.shape[-2:]
    if (out_h, out_w) == (h, w):
        return x
    return _separable("upsample_bilinear", x, _bilinear_matrix(h, out_h), _bilinear_matrix(w, out_w))


# ---------------------------------------------------------------------------
# normalisation


def _check_axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"axis {axis} out of range for shape {x.shape}")
    return axis % x.ndim


def _softmax_inplace(z: np.ndarray, axis: int) -> np.ndarray:
    if axis == z.ndim - 1 and z.flags.c_contiguous:
        return kernels.softmax_lastaxis_(z)
    z -= z.max(axis=axis, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=axis, keepdims=True)
    return z


def _softmax_grad(y: np.ndarray, g: np.ndarray, axis: int) -> np.ndarray:
    if axis == y.ndim - 1 and y.flags.c_contiguous:
        return kernels.softmax_lastaxis_grad(y, g)
    out = g * y
    s = out.sum(axis=axis, keepdims=True)
    out -= y * s
    return out


def softmax(x: Tensor, axis: int) -> Tensor:
    axis = _check_axis(x, axis)
    y = _softmax_inplace(x.data.copy(), axis)
    return _make("softmax", y, (x,), lambda g: (_softmax_grad(y, g, axis),))


def log_softmax(x: Tensor, axis: int) -> Tensor:
    axis = _check_axis(x, axis)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", y, (x,), bw)


def softmax_spatial(x: Tensor) -> Tensor:
    """Softmax over all ``H*W`` positions of each ``[N,1,H,W]`` map."""
    n, c, h, w = x.shape
    return reshape(softmax(reshape(x, (n, c, h * w)), axis=-1), (n, c, h, w))


def cross_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Fused ``v @ softmax_cols(q^T k)`` for ``q, k: [N, C', P]`` and ``v: [N, C, P]``.

    Equivalent to ``matmul(v, softmax(matmul(transpose(q), k), axis=1))``; the
    mask is kept transposed so the softmax runs along the contiguous axis.
    """
    if q.ndim != 3 or q.shape != k.shape or v.ndim != 3 or v.shape[::2] != q.shape[::2]:
        raise DimensionError(f"cross attention: q {q.shape}, k {k.shape}, v {v.shape}")
    # mask_t[n, j, i] = mask[n, i, j]
    mask_t = _softmax_inplace(np.matmul(np.swapaxes(k.data, 1, 2), q.data), axis=2)
    # products are arranged so the big [P, P] operand is never transposed (numpy would copy it)
    out = np.ascontiguousarray(np.swapaxes(np.matmul(mask_t, np.swapaxes(v.data, 1, 2)), 1, 2))

    def bw(g):
        gv = np.matmul(g, mask_t) if v.requires_grad else None
        if not (q.requires_grad or k.requires_grad):
            return None, None, gv
        gs = _softmax_grad(mask_t, np.matmul(np.swapaxes(g, 1, 2), v.data), axis=2)
        gq = np.matmul(k.data, gs) if q.requires_grad else None
        gk = np.swapaxes(np.matmul(gs, np.swapaxes(q.data, 1, 2)), 1, 2) if k.requires_grad else None
        return gq, gk, gv

    return _make("cross_attention", out, (q, k, v), bw)
