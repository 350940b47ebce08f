"""Benchmark the compiled best-response kernel against the numpy fallback.

Usage: python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from routegame import _br_py

try:
    from routegame import _br_cy
except ImportError:
    _br_cy = None


def setup(seed, n, m):
    rng = np.random.default_rng(seed)
    base = rng.uniform(-2.0, 5.0, (n, m))
    alpha = rng.uniform(0.5, 10.0, m)
    demands = rng.uniform(0.0, 20.0, n)
    w_q = float(rng.uniform(0.5, 2.0))
    flow = np.repeat(demands[:, None], m, axis=1) / m
    return flow, flow.sum(axis=0), base, alpha, w_q, demands


def run(kernel, args, rounds, repeats):
    best = np.inf
    for _ in range(repeats):
        flow, load, base, alpha, w_q, demands = (a.copy() if hasattr(a, "copy") else a
                                                 for a in args)
        t0 = time.perf_counter()
        kernel.best_response_rounds(flow, load, base, alpha, w_q, demands, rounds)
        best = min(best, time.perf_counter() - t0)
    return best, flow


def main():
    if _br_cy is None:
        print("compiled kernel not built; only the numpy fallback is available")
        return
    rounds = 200
    print(f"{rounds} best-response rounds, best of 5 runs")
    print(f"{'n':>4} {'m':>4} {'compiled':>12} {'numpy':>12} {'speedup':>9} {'max dev':>10}")
    for n, m in [(2, 4), (5, 8), (10, 10), (20, 20), (50, 30), (100, 50)]:
        args = setup(0, n, m)
        t_cy, flow_cy = run(_br_cy, args, rounds, 5)
        t_py, flow_py = run(_br_py, args, rounds, 5)
        dev = float(np.abs(flow_cy - flow_py).max())
        print(f"{n:>4} {m:>4} {t_cy * 1e3:>10.2f}ms {t_py * 1e3:>10.2f}ms "
              f"{t_py / t_cy:>8.1f}x {dev:>10.2e}")


if __name__ == "__main__":
    main()
