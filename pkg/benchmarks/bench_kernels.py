"""Compare the numba and numpy edit-distance kernels.

    python3 benchmarks/bench_kernels.py [--pairs N] [--length L]

Reports the time per pair for each kernel on random token-id sequences
and checks that both return the same distances.
"""

import argparse
import time

import numpy as np

from asrmerge import _accel, kernels


def bench(fn, pairs, repeat=3):
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        out = [fn(a, b) for a, b in pairs]
        best = min(best, time.perf_counter() - start)
    return best, out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=2000)
    ap.add_argument("--length", type=int, default=40, help="mean sequence length in words")
    ap.add_argument("--vocab", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    lengths = rng.poisson(args.length, size=(args.pairs, 2))
    pairs = [(rng.integers(0, args.vocab, size=m), rng.integers(0, args.vocab, size=n)) for m, n in lengths]

    print(f"{args.pairs} pairs, mean length {args.length}, numba compiled: {_accel.USE_NUMBA}")
    results = {}
    t_np, results["numpy"] = bench(kernels.levenshtein_numpy, pairs)
    print(f"numpy  {1e6 * t_np / args.pairs:9.1f} us/pair")
    if _accel.USE_NUMBA:
        kernels.levenshtein_numba(pairs[0][0], pairs[0][1])  # compile outside the timing
        t_nb, results["numba"] = bench(kernels.levenshtein_numba, pairs)
        print(f"numba  {1e6 * t_nb / args.pairs:9.1f} us/pair  ({t_np / t_nb:.1f}x)")
        assert results["numba"] == results["numpy"], "kernels disagree"
        print("kernels agree on all pairs")


if __name__ == "__main__":
    main()
