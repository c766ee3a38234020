"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--batch 32] [--density 0.2]

For each kernel: best-of-``repeat`` wall time per backend, speedup, and the
max absolute difference between the two results.  The last column names
the implementation ``ibrasnn.kernels`` dispatches to by default.
"""
import argparse
import sys
import timeit

import numpy as np

from ibrasnn import kernels


def cases(batch, rng, density):
    x = rng.standard_normal((batch, 8, 16, 16)).astype(np.float32)
    w = rng.standard_normal((16, 8, 3, 3)).astype(np.float32)
    gy = rng.standard_normal((batch, 16, 16, 16)).astype(np.float32)
    bits = (rng.random((batch * 9, 8, 16, 16)) < density).astype(np.uint8)
    bits_lin = (rng.random((batch * 9, 512)) < density).astype(np.uint8)
    w_lin = rng.standard_normal((64, 512))
    codes = rng.integers(0, 512, size=(batch, 16, 16, 16)).astype(np.int32)
    return {
        "conv2d_forward": lambda m: m.conv2d_forward(x, w, 1, 1),
        "conv2d_grad_input": lambda m: m.conv2d_grad_input(gy, w, x.shape, 1, 1),
        "conv2d_grad_weight": lambda m: m.conv2d_grad_weight(gy, x, w.shape, 1, 1),
        "spike_conv2d": lambda m: m.spike_conv2d(bits, w, 1, 1),
        "spike_linear": lambda m: m.spike_linear(bits_lin, w_lin),
        "bitplanes": lambda m: m.bitplanes(codes, 9),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--density", type=float, default=0.2, help="fraction of set bits in spike inputs")
    args = ap.parse_args(argv)

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the numpy backend is available", file=sys.stderr)
    rng = np.random.default_rng(args.seed)
    header = f"{'kernel':<20}" + "".join(f"{b + ' (ms)':>16}" for b in backends)
    print(header + f"{'speedup':>10}{'max diff':>12}  default")
    for name, fn in cases(args.batch, rng, args.density).items():
        times, outs = {}, {}
        for b, mod in backends.items():
            outs[b] = fn(mod)
            times[b] = min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeat)) * 1e3
        diff = float(np.max(np.abs(outs["python"].astype(np.float64) - outs["cython"].astype(np.float64)))) \
            if "cython" in outs else 0.0
        speed = times["python"] / times["cython"] if "cython" in times else 1.0
        row = f"{name:<20}" + "".join(f"{times[b]:>16.2f}" for b in backends)
        print(row + f"{speed:>9.2f}x{diff:>12.2e}  {kernels.SELECTED[name]}")


if __name__ == "__main__":
    main()
