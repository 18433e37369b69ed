"""Central-difference gradient oracle."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor, backward, no_grad, precision, tensor


def _analytic(f: Callable[[], Tensor], leaves) -> list[np.ndarray]:
    for t in leaves:
        t.grad = None
    backward(f())
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in leaves]


def _numeric(f, t: Tensor, idx: int, eps: float) -> float:
    flat = t.data.reshape(-1)
    orig = flat[idx]
    with no_grad():
        flat[idx] = orig + eps
        up = float(f().data)
        flat[idx] = orig - eps
        down = float(f().data)
    flat[idx] = orig
    return (up - down) / (2 * eps)


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
                      max_coords: int | None = None, seed: int = 0) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.

    ``f`` maps ``x`` to a scalar tensor. With ``max_coords`` only a seeded random
    subset of coordinates is probed.
    """
    return check_params(lambda: f(x), {"x": x}, eps=eps, max_coords=max_coords, seed=seed)["x"]


def check_params(f: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-5,
                 max_coords: int | None = None, seed: int = 0) -> dict[str, float]:
    """Per-tensor max relative error of the tape gradient of ``f()`` wrt each entry of ``params``."""
    names = list(params)
    leaves = [params[n] for n in names]
    for t in leaves:
        t.requires_grad = True
    grads = _analytic(f, leaves)
    rng = np.random.default_rng(seed)
    report = {}
    for name, t, g in zip(names, leaves, grads):
        size = t.data.size
        coords = np.arange(size)
        if max_coords is not None and size > max_coords:
            coords = rng.choice(size, max_coords, replace=False)
        gflat = g.reshape(-1)
        worst = 0.0
        for i in coords:
            a = float(gflat[i])
            err = abs(a - _numeric(f, t, int(i), eps)) / max(1.0, abs(a))
            worst = max(worst, err)
        report[name] = worst
    return report


# ---------------------------------------------------------------------------
# suite over every differentiable op


OP_TOLERANCE = 1e-4
BLOCK_TOLERANCE = 1e-3


def _t(rng, *shape) -> Tensor:
    return tensor(rng.standard_normal(shape), requires_grad=True)


def _op_cases(rng, size: int) -> dict:
    """``name -> (fn, inputs)``; ``fn(*inputs)`` returns a non-scalar tensor."""
    n, c, h, w = 2, 3, size, size + 1
    pos = tensor(rng.uniform(0.5, 2.0, (n, c, h, w)), requires_grad=True)
    basis = rng.standard_normal((c, h, w))
    return {
        "add": (T.add, [_t(rng, n, c, h, w), _t(rng, n, c, 1, 1)]),
        "sub": (T.sub, [_t(rng, n, c, h, w), _t(rng, n, c, h, w)]),
        "mul": (T.mul, [_t(rng, n, c, h, w), _t(rng, n, c, 1, 1)]),
        "div": (T.div, [_t(rng, n, c, h, w), pos]),
        "scalar_mul": (lambda a: T.scalar_mul(a, -1.7), [_t(rng, n, c)]),
        "sigmoid": (T.sigmoid, [_t(rng, n, c, h, w)]),
        # keep inputs away from the kink so central differences are valid
        "relu": (T.relu, [tensor(rng.choice([-1.0, 1.0], (n, c, h, w)) * rng.uniform(0.1, 1.0, (n, c, h, w)),
                                 requires_grad=True)]),
        "broadcast_mul_channel": (T.broadcast_mul_channel, [_t(rng, n, c, h, w), _t(rng, n, c)]),
        "broadcast_mul_spatial": (T.broadcast_mul_spatial, [_t(rng, n, c, h, w), _t(rng, n, 1, h, w)]),
        "reshape": (lambda a: T.reshape(a, (n, c * h * w)), [_t(rng, n, c, h, w)]),
        "transpose": (T.transpose, [_t(rng, n, c, h)]),
        "sum": (lambda a: T.sum(a, axis=(2, 3)), [_t(rng, n, c, h, w)]),
        "mean": (lambda a: T.mean(a, axis=1, keepdims=True), [_t(rng, n, c, h, w)]),
        "concat_channels": (lambda a, b: T.concat_channels([a, b]), [_t(rng, n, c, h, w), _t(rng, n, 2, h, w)]),
        "channel_slice": (lambda a: T.channel_slice(a, 1, 3), [_t(rng, n, 4, h, w)]),
        "matmul": (T.matmul, [_t(rng, n, c, h), _t(rng, n, h, w)]),
        "linear": (T.linear, [_t(rng, n, c), _t(rng, 5, c), _t(rng, 5)]),
        "conv2d_pointwise": (T.conv2d_pointwise, [_t(rng, n, c, h, w), _t(rng, 4, c), _t(rng, 4)]),
        "conv2d_depthwise": (lambda x, k, b: T.conv2d_depthwise(x, k, b, dilation=2),
                             [_t(rng, n, c, h, w), _t(rng, c, 3, 3), _t(rng, c)]),
        "weighted_spatial_sum": (lambda x: T.weighted_spatial_sum(x, basis), [_t(rng, n, c, h, w)]),
        "adaptive_avg_pool": (lambda x: T.adaptive_avg_pool(x, max(1, h // 2), max(1, w // 2)),
                              [_t(rng, n, c, h, w)]),
        "upsample_bilinear": (lambda x: T.upsample_bilinear(x, 2 * h, 2 * w), [_t(rng, n, c, h, w)]),
        "softmax": (lambda x: T.softmax(x, axis=1), [_t(rng, n, c, h, w)]),
        "log_softmax": (lambda x: T.log_softmax(x, axis=1), [_t(rng, n, c, h, w)]),
        "cross_attention": (T.cross_attention, [_t(rng, n, 2, h * w), _t(rng, n, 2, h * w), _t(rng, n, c, h * w)]),
    }


OP_NAMES = tuple(_op_cases(np.random.default_rng(0), 3))


def _projected(fn, inputs, rng):
    """Scalar ``sum(fn(*inputs) * R)`` with a fixed random ``R``, so no gradient cancels by symmetry."""
    with no_grad():
        shape = fn(*inputs).shape
    r = tensor(rng.standard_normal(shape))
    return lambda: T.sum(T.mul(fn(*inputs), r))


def check_ops(seed: int = 0, size: int = 5) -> dict[str, float]:
    """Max relative error of every tape op on random 64-bit inputs."""
    with precision("f64"):
        rng = np.random.default_rng(seed)
        report = {}
        for name, (fn, inputs) in _op_cases(rng, size).items():
            errs = check_params(_projected(fn, inputs, rng), {str(i): t for i, t in enumerate(inputs)}, seed=seed)
            report[name] = max(errs.values())
    return report


def check_sgf_block(seed: int = 0, size: int = 5, channels: int = 16, max_coords: int = 24) -> float:
    """Max relative error over inputs and a sample of every parameter tensor of the full block."""
    from .sgf import FeaturePair, SgfParams, sgf_forward
    from .spectral import SpectralBasisSet, default_group_count

    with precision("f64"):
        rng = np.random.default_rng(seed)
        params = SgfParams.init(channels, 3, seed=rng)
        # mask convs start at zero; randomise them so the spatial softmax is not flat
        for conv in (params.mask_conv_rgb, params.mask_conv_t):
            conv.w.data[...] = rng.uniform(-0.5, 0.5, conv.w.shape)
        basis = SpectralBasisSet.build(default_group_count(channels), min(7, size), min(7, size + 1))
        x_rgb, x_t = _t(rng, 1, channels, size, size + 1), _t(rng, 1, channels, size, size + 1)
        r = [tensor(rng.standard_normal((1, channels, size, size + 1))) for _ in range(2)]
        r_head = tensor(rng.standard_normal((1, 3, size, size + 1)))

        def loss():
            fused, prelim = sgf_forward(FeaturePair(x_rgb, x_t), params, basis)
            return T.sum(T.mul(fused.rgb, r[0])) + T.sum(T.mul(fused.thermal, r[1])) + T.sum(T.mul(prelim, r_head))

        leaves = {"x.rgb": x_rgb, "x.thermal": x_t, **dict(params.named())}
        errs = check_params(loss, leaves, max_coords=max_coords, seed=seed)
    return max(errs.values())


def run_suite(seeds=(0, 1, 2), size: int = 5) -> tuple[dict[str, float], float]:
    """Worst error per op and for the full block across ``seeds``."""
    ops: dict[str, float] = {}
    block = 0.0
    for s in seeds:
        for name, err in check_ops(s, size).items():
            ops[name] = max(ops.get(name, 0.0), err)
        block = max(block, check_sgf_block(s, size))
    return ops, block
