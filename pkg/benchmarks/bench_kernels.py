"""Time each hot kernel under the compiled and the numpy backend.

Shapes match a default training step (batch 32 doubled for the masked pass,
17 positions, width 32, FFN width 128) plus the retrieval workloads.

    python benchmarks/bench_kernels.py [--repeats 20] [--csv out.csv]
"""

from __future__ import annotations

import argparse
import csv
import sys
import time

import numpy as np

from cots import _kernels_py

try:
    from cots import _ckernels
except ImportError:
    _ckernels = None


def _cases(rng: np.random.Generator) -> dict:
    rows, d, ffn = 64 * 17, 32, 128
    x = rng.standard_normal((rows, d))
    gain, bias = rng.standard_normal(d), rng.standard_normal(d)
    g = rng.standard_normal((rows, d))
    h = rng.standard_normal(rows * ffn)
    gh = rng.standard_normal(rows * ffn)
    att = rng.standard_normal((64 * 2 * 17, 17))
    gatt = rng.standard_normal(att.shape)
    scores = rng.standard_normal((2000, 2000))
    cols = np.arange(2000, dtype=np.int64)
    q, c = rng.standard_normal((300, d)), rng.standard_normal((300, d))
    w1, b1, w2 = rng.standard_normal((d, 32)), rng.standard_normal(32), rng.standard_normal(32)

    def ln_bwd_args(k):
        _, xhat, rstd = k.layer_norm_fwd(x, gain, bias, 1e-5)
        return (g, xhat, rstd, gain)

    def gelu_bwd_args(k):
        _, t = k.gelu_fwd(h)
        return (h, t, gh)

    return {
        "layer_norm_fwd": lambda k: (x, gain, bias, 1e-5),
        "layer_norm_bwd": ln_bwd_args,
        "gelu_fwd": lambda k: (h,),
        "gelu_bwd": gelu_bwd_args,
        "softmax_fwd": lambda k: (att,),
        "softmax_bwd": lambda k: (k.softmax_fwd(att), gatt),
        "rank_counts": lambda k: (scores, cols),
        "pair_fusion_scores": lambda k: (q, c, w1, b1, w2),
    }


def best_time(fn, args, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--csv", help="also write the table as CSV")
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; nothing to compare", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    rows = []
    for name, make_args in _cases(rng).items():
        t_py = best_time(getattr(_kernels_py, name), make_args(_kernels_py), args.repeats)
        t_c = best_time(getattr(_ckernels, name), make_args(_ckernels), args.repeats)
        rows.append((name, t_py * 1e3, t_c * 1e3, t_py / t_c))
    print(f"{'kernel':<20} {'numpy_ms':>10} {'cython_ms':>10} {'speedup':>8}")
    for name, a, b, s in rows:
        print(f"{name:<20} {a:>10.3f} {b:>10.3f} {s:>8.2f}")
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["kernel", "numpy_ms", "cython_ms", "speedup"])
            w.writerows(rows)
    return 0


if __name__ == "__main__":
    sys.exit(main())
