"""Compare the compiled and pure-Python kernel backends.

Times the convolution and pooling primitives on shapes representative of
the detector trunk and prints a table plus the backend the auto selector
should prefer. Run as `python3 benchmarks/bench_kernels.py`.
"""

import time

import numpy as np

from msfuse.kernels import load_backend

SHAPES = [
    # (label, x shape NHWC, w shape khkwCinCout, stride, pad)
    ("trunk 64x64x3 -> 16", (1, 64, 64, 3), (3, 3, 3, 16), 1, 1),
    ("trunk 32x32x16 -> 32", (1, 32, 32, 16), (3, 3, 16, 32), 1, 1),
    ("trunk 16x16x32 -> 64", (1, 16, 16, 32), (3, 3, 32, 64), 1, 1),
    ("ian batch 64x56x56x3", (64, 56, 56, 3), (3, 3, 3, 16), 1, 1),
]

POOL_SHAPES = [
    ("pool 64x64x16", (1, 64, 64, 16)),
    ("pool batch 64x56x56x16", (64, 56, 56, 16)),
]


def _time(fn, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def main():
    rng = np.random.default_rng(0)
    backends = {name: load_backend(name) for name in ("python", "compiled")}
    totals = dict.fromkeys(backends, 0.0)

    print(f"{'case':<28} {'python':>10} {'compiled':>10} {'ratio':>7}")
    for label, xs, ws, stride, pad in SHAPES:
        x = rng.standard_normal(xs)
        w = rng.standard_normal(ws)
        b = rng.standard_normal(ws[-1])
        times = {}
        out = {}
        for name, mod in backends.items():
            out[name] = mod.conv2d_forward(x, w, b, stride, pad)
            times[name] = _time(lambda m=mod: m.conv2d_forward(x, w, b, stride, pad))
            totals[name] += times[name]
        assert np.allclose(out["python"], out["compiled"], atol=1e-10)
        print(f"{label:<28} {times['python'] * 1e3:>8.2f}ms {times['compiled'] * 1e3:>8.2f}ms "
              f"{times['compiled'] / times['python']:>6.1f}x")

    for label, xs in POOL_SHAPES:
        x = rng.standard_normal(xs)
        times = {}
        out = {}
        for name, mod in backends.items():
            out[name] = mod.maxpool2x2_forward(x)
            times[name] = _time(lambda m=mod: m.maxpool2x2_forward(x))
            totals[name] += times[name]
        assert np.allclose(out["python"][0], out["compiled"][0])
        assert np.array_equal(out["python"][1], out["compiled"][1])
        print(f"{label:<28} {times['python'] * 1e3:>8.2f}ms {times['compiled'] * 1e3:>8.2f}ms "
              f"{times['compiled'] / times['python']:>6.1f}x")

    winner = min(totals, key=totals.get)
    print(f"\ntotal: python {totals['python'] * 1e3:.1f}ms, "
          f"compiled {totals['compiled'] * 1e3:.1f}ms -> auto should pick '{winner}'")


if __name__ == "__main__":
    main()
