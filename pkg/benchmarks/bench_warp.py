"""Compare the compiled and numpy warp kernels.

    python benchmarks/bench_warp.py [--repeat 20]

Prints one row per (shape, op) with the median time of each backend, the
speed-up, and the max absolute difference between their outputs.
"""

import argparse
import timeit

import numpy as np

from hetreg import _kernels

CASES = [
    ("2D 8x1x64x64", (8, 1, 64, 64)),
    ("2D 8x1x128x128", (8, 1, 128, 128)),
    ("3D 1x1x32x32x32", (1, 1, 32, 32, 32)),
]


def inputs(shape, rng):
    b, c, *spatial = shape
    image = rng.random(shape)
    disp = 3.0 * rng.standard_normal((b, len(spatial), *spatial))
    grad = rng.standard_normal(shape)
    mask = (rng.random(shape) > 0.5).astype(np.float64)
    return image, disp, grad, mask


def median_time(fn, repeat):
    return float(np.median(timeit.repeat(fn, number=1, repeat=repeat)))


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--repeat", type=int, default=20)
    args = p.parse_args()
    try:
        _kernels.get_backend("cython")
    except ImportError:
        print("compiled kernels unavailable; rebuild with `pip install -e . --no-build-isolation`")
        return 1
    fast, slow = "cython", "python"
    rng = np.random.default_rng(0)
    print(f"{'case':<18} {'op':<9} {'cython ms':>10} {'numpy ms':>10} {'speed-up':>9} {'max diff':>10}")
    for name, shape in CASES:
        image, disp, grad, mask = inputs(shape, rng)
        ops = {
            "forward": lambda k: _kernels.linear_warp_forward(image, disp, backend=k),
            "backward": lambda k: _kernels.linear_warp_backward(image, disp, grad, backend=k),
            "nearest": lambda k: _kernels.nearest_warp(mask, disp, backend=k),
        }
        for op, call in ops.items():
            a, b = call(fast), call(slow)
            a = a if isinstance(a, tuple) else (a,)
            b = b if isinstance(b, tuple) else (b,)
            diff = max(float(np.abs(x - y).max()) for x, y in zip(a, b))
            tf = median_time(lambda: call(fast), args.repeat) * 1e3
            ts = median_time(lambda: call(slow), args.repeat) * 1e3
            print(f"{name:<18} {op:<9} {tf:>10.3f} {ts:>10.3f} {ts / tf:>8.1f}x {diff:>10.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
