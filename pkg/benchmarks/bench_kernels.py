"""Compiled vs numpy kernel backends: per-kernel timings and a full model forward.

    python3 benchmarks/bench_kernels.py [--repeats 20] [--variant XS] [--resolution 256]

Prints best-of-repeats milliseconds per backend and the compiled/python speed ratio.
"""

import argparse
import time

import numpy as np

from mobilevit import _kernels
from mobilevit.model import build
from mobilevit.tensor import Tensor, no_grad


def best_ms(fn, repeats):
    fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return 1e3 * best


def kernel_cases(rng):
    # shapes typical of XS at 256x256
    x = rng.standard_normal((1, 48, 64, 64), dtype=np.float32)
    cols = rng.standard_normal((1, 48 * 9, 64 * 64), dtype=np.float32)
    xd = rng.standard_normal((1, 192, 32, 32), dtype=np.float32)
    wd = rng.standard_normal((192, 1, 3, 3), dtype=np.float32)
    gd = rng.standard_normal((1, 192, 32, 32), dtype=np.float32)
    return {
        "im2col 48x64x64 k3": lambda k: k.im2col(x, 3, 3, 1, 1),
        "col2im 48x64x64 k3": lambda k: k.col2im(cols, x.shape, 3, 3, 1, 1),
        "depthwise fwd 192x32x32": lambda k: k.depthwise_forward(xd, wd, 1, 1),
        "depthwise bwd 192x32x32": lambda k: k.depthwise_backward(gd, xd, wd, 1, 1),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--variant", default="XS")
    ap.add_argument("--resolution", type=int, default=256)
    args = ap.parse_args()

    backends = _kernels.available()
    if "compiled" not in backends:
        print("compiled extension not built; only the python backend is available")
    rng = np.random.default_rng(0)
    rows = []
    for name, fn in kernel_cases(rng).items():
        rows.append((name, {b: best_ms(lambda: fn(_kernels.BACKENDS[b]), args.repeats) for b in backends}))

    model = build(args.variant, 0).eval()
    x = Tensor(rng.standard_normal((1, 3, args.resolution, args.resolution), dtype=np.float32))
    times = {}
    for b in backends:
        _kernels.use(b)
        with no_grad():
            times[b] = best_ms(lambda: model(x), max(3, args.repeats // 4))
    rows.append((f"{args.variant} forward @{args.resolution}", times))

    print(f"{'case':<28}" + "".join(f"{b + ' ms':>14}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for name, t in rows:
        line = f"{name:<28}" + "".join(f"{t[b]:>14.3f}" for b in backends)
        if len(backends) > 1:
            line += f"   {t['python'] / t['compiled']:>6.2f}x"
        print(line)


if __name__ == "__main__":
    main()
