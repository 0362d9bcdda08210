"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeats 5] [--records 20000]

Each kernel runs once untimed first so numba compile time is excluded. The
two backends are also checked for agreement on every input.
"""

import argparse
import time

import numpy as np

from budgetcascade import _kernels


def best_of(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def stage_sums_case(rng, n, m, grid):
    sizes = np.full(m - 1, grid, dtype=np.int64)
    bins = rng.integers(0, grid + 1, size=(n, m - 1))
    rewards = rng.integers(0, 2, size=(n, m)).astype(np.float64)
    cum_costs = np.cumsum(rng.integers(1, 10**6, size=(n, m)), axis=1)
    return (bins, rewards, cum_costs, sizes)


def sparse_case(rng, n, dims=1 << 16, nnz=120):
    indptr = np.arange(0, (n + 1) * nnz, nnz, dtype=np.int64)
    indices = np.sort(rng.integers(0, dims, size=(n, nnz)), axis=1).ravel()
    data = rng.random(n * nnz)
    y = rng.integers(0, 2, size=n).astype(np.float64)
    return indptr, indices, data, y, np.zeros(dims)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--records", type=int, default=20_000)
    args = ap.parse_args()
    if not _kernels.NUMBA_AVAILABLE:
        raise SystemExit("numba is not installed; nothing to compare")
    rng = np.random.default_rng(0)
    rows = []

    for m, grid in ((2, 19), (3, 19), (3, 31)):
        case = stage_sums_case(rng, args.records, m, grid)
        a = _kernels.stage_sums(*case, backend="numba")
        b = _kernels.stage_sums(*case, backend="numpy")
        assert np.array_equal(a[1], b[1]) and np.allclose(a[0], b[0])
        rows.append((f"stage_sums m={m} G={grid}",
                     best_of(lambda: _kernels.stage_sums(*case, backend="numba"), args.repeats),
                     best_of(lambda: _kernels.stage_sums(*case, backend="numpy"), args.repeats)))

    indptr, indices, data, y, w0 = sparse_case(rng, args.records)
    assert np.allclose(_kernels.margins(indptr, indices, data, w0 + 0.1, 0.2, "numba"),
                       _kernels.margins(indptr, indices, data, w0 + 0.1, 0.2, "numpy"))
    rows.append(("margins",
                 best_of(lambda: _kernels.margins(indptr, indices, data, w0, 0.0, "numba"), args.repeats),
                 best_of(lambda: _kernels.margins(indptr, indices, data, w0, 0.0, "numpy"), args.repeats)))
    order = rng.permutation(len(y))

    def epoch(backend):
        return lambda: _kernels.sgd_epoch(indptr, indices, data, y, order, w0.copy(), 0.0, 0.5, 1e-4, 32,
                                          backend)

    rows.append(("sgd_epoch batch=32", best_of(epoch("numba"), args.repeats),
                 best_of(epoch("numpy"), args.repeats)))

    print(f"{'kernel':<24} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for name, t_jit, t_np in rows:
        print(f"{name:<24} {t_jit * 1e3:>10.2f} {t_np * 1e3:>10.2f} {t_np / t_jit:>7.1f}x")


if __name__ == "__main__":
    main()
