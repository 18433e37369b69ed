"""Compiled vs numpy kernels, plus one full training step under each backend.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from sgfnet import _kernels_py

try:
    from sgfnet import _ckernels
except ImportError:
    _ckernels = None

STEP_SNIPPET = """
import timeit
from sgfnet import kernels
from sgfnet.data import gen_dataset
from sgfnet.network import NetworkConfig, SGFNet, stack_batch, total_loss
from sgfnet.tensor import backward
model = SGFNet(NetworkConfig())
rgb, th, labels = stack_batch(gen_dataset(2, 64, 96, 4, 0))
def step():
    final, prelims = model.forward(*model.prepare_inputs(rgb, th))
    backward(total_loss(final, prelims, labels))
step()
print(kernels.BACKEND, min(timeit.repeat(step, number=1, repeat={repeat})))
"""


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_rows(repeat):
    rng = np.random.default_rng(0)
    cases = [
        ("dw 3x3, 16ch 32x48", (2, 16, 32, 48), 3, 1),
        ("dw 5x5, 32ch 16x24", (2, 32, 16, 24), 5, 1),
        ("dw 7x7 d3, 256ch 4x6", (2, 256, 4, 6), 7, 3),
        ("dw 7x7 d3, 32ch 32x48", (2, 32, 32, 48), 7, 3),
    ]
    for label, shape, k, d in cases:
        x = rng.standard_normal(shape).astype(np.float32)
        w = rng.standard_normal((shape[1], k, k)).astype(np.float32)
        g = rng.standard_normal(shape).astype(np.float32)
        for what, py, c in (
            ("fwd", lambda: _kernels_py.dwconv_forward(x, w, d), lambda: _ckernels.dwconv_forward(x, w, d)),
            ("bwd", lambda: _kernels_py.dwconv_backward(x, w, g, d), lambda: _ckernels.dwconv_backward(x, w, g, d)),
        ):
            yield f"{label} {what}", best(py, repeat), best(c, repeat) if _ckernels else float("nan")
    y = _kernels_py.softmax_lastaxis_(rng.standard_normal((2, 1536, 1536)).astype(np.float32))
    g = rng.standard_normal(y.shape).astype(np.float32)
    yield ("softmax grad 2x1536x1536", best(lambda: _kernels_py.softmax_lastaxis_grad(y, g), repeat),
           best(lambda: _ckernels.softmax_lastaxis_grad(y, g), repeat) if _ckernels else float("nan"))


def step_time(pure: bool, repeat: int) -> str:
    env = dict(os.environ)
    env.pop("SGFNET_PURE_PYTHON", None)
    if pure:
        env["SGFNET_PURE_PYTHON"] = "1"
    res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=repeat)], env=env,
                         capture_output=True, text=True, check=True)
    return res.stdout.strip()


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; only the numpy column is meaningful")
    print(f"{'kernel':<30s} {'numpy ms':>9s} {'cython ms':>10s} {'speedup':>8s}")
    for label, t_py, t_c in kernel_rows(args.repeat):
        print(f"{label:<30s} {1e3 * t_py:9.2f} {1e3 * t_c:10.2f} {t_py / t_c:7.1f}x")
    print()
    print("full training step, batch 2 at 64x96 (seconds):")
    for pure in (True, False):
        backend, secs = step_time(pure, max(2, args.repeat // 2)).split()
        print(f"  {backend:<8s} {float(secs):.3f}")


if __name__ == "__main__":
    main()
