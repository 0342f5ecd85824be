"""Compare the compiled kernels with the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from ssrec import _fallback, kernels


def cases(rng):
    n, nnz_per_row, d = 20_000, 12, 64
    indptr = np.arange(0, n * nnz_per_row + 1, nnz_per_row, dtype=np.int64)
    indices = np.sort(rng.integers(0, n, size=(n, nnz_per_row)), axis=1).ravel()
    data = rng.random(len(indices))
    X = rng.standard_normal((n, d))
    yield "csr_matmat 20k x 64", lambda impl: kernels.csr_matmat(indptr, indices, data, X, impl=impl)

    n_users, n_items = 5_000, 2_000
    ptr = np.arange(0, n_users * 40 + 1, 40, dtype=np.int64)
    idx = np.sort(np.stack([rng.choice(n_items, 40, replace=False) for _ in range(n_users)]), axis=1).ravel()
    users = rng.integers(0, n_users, 200_000)
    cand = rng.integers(0, n_items, (len(users), 8))
    yield "first_free_candidate 200k x 8", \
        lambda impl: kernels.first_free_candidate(users, cand, ptr, idx, impl=impl)

    rows = np.arange(2_000)
    scores = rng.standard_normal((len(rows), n_items))
    yield "topk_excluding 2k users x 2k items, k=20", \
        lambda impl: kernels.topk_excluding(scores, rows, ptr, idx, 20, impl=impl)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if kernels.BACKEND != "compiled":
        print("compiled extension not available; timing the fallback only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':44s} {'compiled ms':>12s} {'fallback ms':>12s} {'speedup':>8s}")
    for name, fn in cases(rng):
        slow = min(timeit.repeat(lambda: fn(_fallback), number=1, repeat=args.repeat)) * 1e3
        if kernels.BACKEND == "compiled":
            a, b = fn(kernels._impl), fn(_fallback)
            assert np.array_equal(a, b), name
            fast = min(timeit.repeat(lambda: fn(kernels._impl), number=1, repeat=args.repeat)) * 1e3
            print(f"{name:44s} {fast:12.2f} {slow:12.2f} {slow / fast:8.1f}x")
        else:
            print(f"{name:44s} {'-':>12s} {slow:12.2f} {'-':>8s}")


if __name__ == "__main__":
    main()
