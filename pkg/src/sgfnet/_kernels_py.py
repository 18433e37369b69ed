"""Pure-numpy depthwise convolution kernels.

Reference path for the compiled ``_ckernels`` extension; both expose the
same two functions with identical semantics (zero padding, stride 1,
"same" output size).
"""

import numpy as np


def _pad(k, dilation):
    return dilation * (k - 1) // 2


def dwconv_forward(x, w, dilation):
    """Depthwise correlation of ``x[N,C,H,W]`` with ``w[C,k,k]``."""
    n, c, h, wd = x.shape
    k = w.shape[-1]
    p = _pad(k, dilation)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros_like(x)
    for i in range(k):
        oi = i * dilation
        for j in range(k):
            oj = j * dilation
            out += w[None, :, i, j, None, None] * xp[:, :, oi:oi + h, oj:oj + wd]
    return out


def dwconv_backward(x, w, g, dilation):
    """Gradients of :func:`dwconv_forward` wrt ``x`` and ``w`` given upstream ``g``."""
    n, c, h, wd = x.shape
    k = w.shape[-1]
    p = _pad(k, dilation)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for i in range(k):
        oi = i * dilation
        for j in range(k):
            oj = j * dilation
            dxp[:, :, oi:oi + h, oj:oj + wd] += w[None, :, i, j, None, None] * g
            dw[:, i, j] = np.einsum("nchw,nchw->c", g, xp[:, :, oi:oi + h, oj:oj + wd])
    return dxp[:, :, p:p + h, p:p + wd], dw


def softmax_lastaxis_(z):
    """In-place softmax over the last axis."""
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def softmax_lastaxis_grad(y, g):
    """Backward of the last-axis softmax with output ``y``."""
    out = g * y
    s = out.sum(axis=-1, keepdims=True)
    out -= y * s
    return out
