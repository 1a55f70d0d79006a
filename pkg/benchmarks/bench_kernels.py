"""Compare the compiled and pure-Python kernel backends.

    python3 benchmarks/bench_kernels.py [--steps N] [--repeat R]
"""

from __future__ import annotations

import argparse
import time

from triad import kernels
from triad.core import FP_ONE

BACKENDS = ("python", "compiled")


def bench_sweep(mod, steps: int, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        mod.sweep_refresh(10**18, 0, FP_ONE + 12345, 0, 7, 20_000, 3, 0, 7, steps,
                          10**18, 20_000, 0, 0)
        best = min(best, time.perf_counter() - t0)
    return best


def bench_ops(mod, window_ns: int) -> int:
    ops, _, _ = mod.count_ops_window(window_ns, 10**9)
    return ops


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    if not kernels.compiled_available():
        print("compiled extension not built; only the Python backend is measured")
    print(f"{'backend':<10} {'sweep s':>10} {'steps/s':>14} {'ops per 2 ms':>14}")
    results = {}
    for name in BACKENDS:
        if name == "compiled" and not kernels.compiled_available():
            continue
        mod = kernels.get_backend(name)
        secs = bench_sweep(mod, args.steps, args.repeat)
        results[name] = secs
        print(f"{name:<10} {secs:>10.4f} {args.steps / secs:>14,.0f} {bench_ops(mod, 2_000_000):>14,}")
    if len(results) == 2:
        print(f"speedup: {results['python'] / results['compiled']:.1f}x")


if __name__ == "__main__":
    main()
