"""Times the compiled and numpy kernel backends on representative workloads.

Usage:
  python3 benchmarks/bench_kernels.py [--repeat 5] [--rows 20000]

Prints one line per (kernel, backend) with the best wall time over the
repeats, then an end-to-end order-statistics estimate under each backend.
"""

import argparse
import time

import numpy as np

from bnb_accounting import kernels
from bnb_accounting.losses import AccountingParams, Direction, OrderSpec, PairId, PairKind, parse_orders
from bnb_accounting.monte_carlo import McConfig, Strategy, estimate_curve

_SWAPPABLE = ("log_sum_exp_rows", "quantile_rows", "quantile_log_sum_rows")


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def kernel_cases(rows, cols, gen):
    log_u = np.log(gen.random((rows, cols))) * 1e-3
    offsets = -gen.exponential(1.0, rows)
    weights = np.log(gen.integers(1, 30, cols).astype(np.float64))
    dense = gen.normal(0, 2, (rows, cols))
    return {
        "log_sum_exp_rows": lambda k: k.log_sum_exp_rows(dense, 11.1, weights),
        "quantile_rows": lambda k: k.quantile_rows(log_u, offsets, 0.3, True),
        "quantile_log_sum_rows": lambda k: k.quantile_log_sum_rows(log_u, offsets, 0.3, 11.1, weights, True),
    }


def end_to_end(backend, m):
    impl = kernels.load_backend(backend)
    saved = {name: getattr(kernels, name) for name in _SWAPPABLE}
    for name in _SWAPPABLE:
        setattr(kernels, name, getattr(impl, name))
    try:
        params = AccountingParams(0.3, 1000)
        spec = OrderSpec(parse_orders("1..40,45..100:5,110..300:10,325..999:25"), 999)
        cfg = McConfig(m, strategy=Strategy.ORDER_STATS, order_spec=spec)
        start = time.perf_counter()
        est = estimate_curve(PairId(PairKind.BALLS_BINS, Direction.BOTH), params, [2.0], cfg, 0)[0]
        return time.perf_counter() - start, est.mean_q
    finally:
        for name, fn in saved.items():
            setattr(kernels, name, fn)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--rows", type=int, default=20_000)
    parser.add_argument("--cols", type=int, default=100)
    parser.add_argument("--m", type=int, default=200_000, help="samples for the end-to-end run")
    args = parser.parse_args()

    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)} (default {kernels.BACKEND})")
    cases = kernel_cases(args.rows, args.cols, np.random.default_rng(0))
    for name, case in cases.items():
        timings = {b: best_of(lambda: case(kernels.load_backend(b)), args.repeat) for b in backends}
        cells = "  ".join(f"{b}={t * 1e3:8.2f} ms" for b, t in timings.items())
        speedup = timings["python"] / timings["cython"] if "cython" in timings else float("nan")
        print(f"{name:24s} {cells}  speedup={speedup:.2f}x")

    results = {b: end_to_end(b, args.m) for b in backends}
    for b, (t, mean) in results.items():
        print(f"order-stats estimate m={args.m} {b:7s} {t:7.2f} s  mean={mean!r}")
    if len(results) == 2:
        print(f"end-to-end speedup={results['python'][0] / results['cython'][0]:.2f}x")


if __name__ == "__main__":
    main()
