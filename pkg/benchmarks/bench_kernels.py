"""Time the compiled distance kernels against the numpy fallback.

Runs both backends on the same data, checks they agree bitwise, and prints
per-call times with the speedup. Shapes default to bank-query sizes typical
for a 56x56 feature grid.

    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --queries 3136 --bank 5000 --dim 768
"""

import argparse
import time

import numpy as np

from xmad.kernels import METRICS, _purepy, metric_code

try:
    from xmad.kernels import _distcore
except ImportError:
    _distcore = None


def time_call(fn, repeats):
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(queries, bank, dim, repeats, seed):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(queries, dim))
    b = rng.normal(size=(bank, dim)) + 0.5  # offset keeps cosine well defined
    v = b[0].copy()

    print(f"queries={queries} bank={bank} dim={dim} (best of {repeats})")
    header = f"{'kernel':<22}{'metric':<8}{'python':>10}{'native':>10}{'speedup':>9}"
    print(header)
    print("-" * len(header))
    for metric in METRICS:
        code = metric_code(metric)
        for name, pure_call, native_call, parity in (
            (
                "dists_to_vector",
                lambda: _purepy.dists_to_vector(b, v, code),
                lambda: _distcore.dists_to_vector(b, v, code),
                lambda: np.array_equal(
                    _purepy.dists_to_vector(b, v, code),
                    _distcore.dists_to_vector(b, v, code),
                ),
            ),
            (
                "nn_scan",
                lambda: _purepy.nn_scan(q, b, code),
                lambda: _distcore.nn_scan(q, b, code),
                lambda: all(
                    np.array_equal(x, y)
                    for x, y in zip(
                        _purepy.nn_scan(q, b, code), _distcore.nn_scan(q, b, code)
                    )
                ),
            ),
        ):
            t_pure = time_call(pure_call, repeats)
            if _distcore is None:
                print(f"{name:<22}{metric:<8}{t_pure * 1e3:>9.2f}ms{'-':>10}{'-':>9}")
                continue
            t_native = time_call(native_call, repeats)
            if not parity():
                raise SystemExit(f"backends disagree on {name}/{metric}")
            print(
                f"{name:<22}{metric:<8}{t_pure * 1e3:>9.2f}ms"
                f"{t_native * 1e3:>8.2f}ms{t_pure / t_native:>8.1f}x"
            )
    if _distcore is None:
        print("compiled extension not importable; native column skipped")
    else:
        print("all timed outputs bitwise identical across backends")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--queries", type=int, default=3136)  # 56 * 56 cells
    parser.add_argument("--bank", type=int, default=2000)
    parser.add_argument("--dim", type=int, default=768)
    parser.add_argument("--repeats", type=int, default=2)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    bench(args.queries, args.bank, args.dim, args.repeats, args.seed)


if __name__ == "__main__":
    main()
