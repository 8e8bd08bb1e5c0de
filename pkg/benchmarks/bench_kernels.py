"""Timing comparison of the numpy and numba kernel backends.

Runs every kernel on training-sized inputs under each available
backend, cross-checks the outputs, and prints a table of best-of-N
wall times. Numba gets untimed warmup calls so JIT compilation does
not pollute the numbers.

Usage: python3 benchmarks/bench_kernels.py [--repeats N] [--warmup N]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from hellm import kernels


def build_cases(rng):
    """(name, callable(backend) -> outputs) on realistic shapes."""
    vocab, hidden, n_rows = 2000, 64, 4096
    ids = rng.integers(0, vocab, size=n_rows).astype(np.int64)
    rows = rng.normal(size=(n_rows, hidden))
    seq_len, n_labels = 128, 17
    emissions = rng.normal(size=(seq_len, n_labels))
    transitions = rng.normal(size=(n_labels + 2, n_labels + 2))
    return [
        (
            f"scatter_add_rows {n_rows}x{hidden} into {vocab}",
            lambda b: b.scatter_add_rows(np.zeros((vocab, hidden)), ids, rows),
        ),
        (
            f"crf_forward T={seq_len} K={n_labels}",
            lambda b: b.crf_forward(emissions, transitions),
        ),
        (
            f"crf_backward T={seq_len} K={n_labels}",
            lambda b: b.crf_backward(emissions, transitions),
        ),
        (
            f"crf_marginals T={seq_len} K={n_labels}",
            lambda b: b.crf_marginals(emissions, transitions),
        ),
        (
            f"viterbi_decode T={seq_len} K={n_labels}",
            lambda b: b.viterbi_decode(emissions, transitions),
        ),
    ]


def flatten(outputs) -> list[np.ndarray]:
    if isinstance(outputs, tuple):
        return [np.asarray(part, dtype=np.float64) for part in outputs]
    return [np.asarray(outputs, dtype=np.float64)]


def max_difference(a, b) -> float:
    return max(
        float(np.max(np.abs(x - y))) if x.size else 0.0
        for x, y in zip(flatten(a), flatten(b))
    )


def best_time(fn, backend, repeats: int, warmup: int) -> float:
    for _ in range(warmup):
        fn(backend)
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn(backend)
        best = min(best, time.perf_counter() - start)
    return best


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=7,
                        help="timed runs per kernel (default: 7)")
    parser.add_argument("--warmup", type=int, default=2,
                        help="untimed runs per kernel (default: 2)")
    args = parser.parse_args()

    names = kernels.available()
    initial = kernels.active_name()
    backends = {name: kernels.use(name) for name in names}
    kernels.use(initial)
    print(f"backends: {', '.join(names)}")
    if "numba" not in backends:
        print("numba is not importable; timing the numpy fallback only")

    rng = np.random.default_rng(0)
    cases = build_cases(rng)
    header = f"{'kernel':<42}" + "".join(f"{n:>12}" for n in names)
    if len(names) > 1:
        header += f"{'speedup':>10}{'max|diff|':>12}"
    print(header)
    print("-" * len(header))
    for label, fn in cases:
        times = {
            name: best_time(fn, backend, args.repeats, args.warmup)
            for name, backend in backends.items()
        }
        row = f"{label:<42}" + "".join(
            f"{times[n] * 1e3:>10.3f}ms" for n in names
        )
        if len(names) > 1:
            ratio = times["numpy"] / times["numba"]
            diff = max_difference(
                fn(backends["numpy"]), fn(backends["numba"])
            )
            row += f"{ratio:>9.2f}x{diff:>12.2e}"
        print(row)


if __name__ == "__main__":
    main()
