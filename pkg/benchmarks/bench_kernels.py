#!/usr/bin/env python
"""Compare the numba and numpy convolution kernels on desk-network layer shapes.

Usage:
    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --batch 64 --repeat 50
    python benchmarks/bench_kernels.py --output bench.json
"""

import argparse
import json
import time

import numpy as np

from livepad import kernels

# (in_channels, size, out_channels, kernel, stride, pad) for the default desk preset
DESK_LAYERS = [
    (1, 32, 8, 3, 1, 1),
    (8, 32, 8, 3, 2, 1),
    (8, 16, 8, 3, 1, 1),
    (8, 32, 8, 1, 2, 0),
    (8, 16, 16, 3, 2, 1),
    (16, 8, 16, 3, 1, 1),
    (8, 16, 16, 1, 2, 0),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def run(batch, repeat, seed=0):
    if not kernels.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(seed)
    rows = []
    for c, size, f, k, stride, pad in DESK_LAYERS:
        x = rng.standard_normal((batch, c, size, size))
        w = rng.standard_normal((f, c, k, k))
        out = kernels.conv2d_forward_numpy(x, w, stride, pad)
        g = rng.standard_normal(out.shape)

        # compile outside the timed region
        kernels.conv2d_forward_numba(x, w, stride, pad)
        kernels.conv2d_backward_numba(x, w, g, stride, pad)

        diff = np.abs(kernels.conv2d_forward_numba(x, w, stride, pad) - out).max()
        row = {"layer": f"{c}->{f} k{k} s{stride} @{size}", "max_abs_diff": float(diff)}
        for name in ("numpy", "numba"):
            fwd = getattr(kernels, f"conv2d_forward_{name}")
            bwd = getattr(kernels, f"conv2d_backward_{name}")
            row[f"{name}_fwd_ms"] = best_of(lambda: fwd(x, w, stride, pad), repeat) * 1e3
            row[f"{name}_bwd_ms"] = best_of(lambda: bwd(x, w, g, stride, pad), repeat) * 1e3
        rows.append(row)
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--output", help="write results as JSON")
    args = parser.parse_args()

    rows = run(args.batch, args.repeat)
    print(f"batch {args.batch}, best of {args.repeat} (ms)")
    print(f"{'layer':<22}{'np fwd':>9}{'nb fwd':>9}{'np bwd':>9}{'nb bwd':>9}{'speedup':>9}")
    total_np = total_nb = 0.0
    for r in rows:
        t_np = r["numpy_fwd_ms"] + r["numpy_bwd_ms"]
        t_nb = r["numba_fwd_ms"] + r["numba_bwd_ms"]
        total_np += t_np
        total_nb += t_nb
        print(f"{r['layer']:<22}{r['numpy_fwd_ms']:9.2f}{r['numba_fwd_ms']:9.2f}"
              f"{r['numpy_bwd_ms']:9.2f}{r['numba_bwd_ms']:9.2f}{t_np / t_nb:8.2f}x")
    print(f"{'total':<22}{total_np:>18.2f}{total_nb:>18.2f}{total_np / total_nb:8.2f}x")

    if args.output:
        with open(args.output, "w") as fh:
            json.dump({"batch": args.batch, "repeat": args.repeat, "layers": rows}, fh, indent=2)


if __name__ == "__main__":
    main()
