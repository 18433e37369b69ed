"""Backend selection for the hot kernels (depthwise convolution, row softmax).

The compiled extension is used when it was built; otherwise, or when the
environment variable ``SGFNET_PURE_PYTHON`` is set to a non-empty value,
the numpy implementation is used.
"""

import os

from . import _kernels_py

BACKEND = "python"

if not os.environ.get("SGFNET_PURE_PYTHON"):
    try:
        from . import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
else:
    _impl = _kernels_py

dwconv_forward = _impl.dwconv_forward
dwconv_backward = _impl.dwconv_backward
# numpy's vectorised exp beats a scalar libm loop, so the forward softmax is not compiled
softmax_lastaxis_ = _kernels_py.softmax_lastaxis_
softmax_lastaxis_grad = _impl.softmax_lastaxis_grad

__all__ = ["BACKEND", "dwconv_forward", "dwconv_backward", "softmax_lastaxis_", "softmax_lastaxis_grad"]
