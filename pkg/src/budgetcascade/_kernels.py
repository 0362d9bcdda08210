"""Hot numeric kernels, each with a numba and a pure-numpy implementation.

The numba path is used when numba imports and ``FRUGAL_NO_JIT`` is unset (or
"0"). Both paths compute identical integer cost sums; float reward sums agree
exactly for 0/1 rewards and to rounding otherwise.

Cascade grid kernel
-------------------
For a cascade of m steps there are M = m - 1 active thresholds; the last step
always answers. Each record carries, per active position j, ``bins[r, j]`` =
number of grid values <= its score, so threshold index t accepts iff t < bin.
The record stops at the first j with t_j < bins[r, j], else at step m.
Summing a per-step value over records for *every* threshold tuple reduces to
box sums over an M-dimensional histogram of the bins, which prefix sums give
in O(n + prod(G_j + 1)) per step instead of O(n * prod(G_j)).
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def _env_wants_jit() -> bool:
    return os.environ.get("FRUGAL_NO_JIT", "0").strip().lower() in ("", "0", "false", "no")


BACKEND = "numba" if NUMBA_AVAILABLE and _env_wants_jit() else "numpy"


def set_backend(name: str) -> None:
    global BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not NUMBA_AVAILABLE:
        raise RuntimeError("numba is not installed")
    BACKEND = name


# ---------------------------------------------------------------------------
# cascade grid sums


@njit(cache=True)
def _stage_sums_numba(bins, rewards, cum_costs, sizes):
    n, m = rewards.shape
    M = m - 1
    P = 1
    for i in range(M):
        P *= sizes[i]
    out_r = np.zeros(P)
    out_c = np.zeros(P, dtype=np.int64)
    if M == 0:
        for r in range(n):
            out_r[0] += rewards[r, 0]
            out_c[0] += cum_costs[r, 0]
        return out_r, out_c

    radix = sizes + 1
    bstride = np.ones(M, dtype=np.int64)
    tstride = np.ones(M, dtype=np.int64)
    for i in range(M - 2, -1, -1):
        bstride[i] = bstride[i + 1] * radix[i + 1]
        tstride[i] = tstride[i + 1] * sizes[i + 1]
    B = bstride[0] * radix[0]

    flat = np.zeros(n, dtype=np.int64)
    for r in range(n):
        f = 0
        for i in range(M):
            f += bins[r, i] * bstride[i]
        flat[r] = f

    hr = np.empty(B)
    hc = np.empty(B, dtype=np.int64)
    tdig = np.empty(M, dtype=np.int64)
    for j in range(m):
        hr[:] = 0.0
        hc[:] = 0
        for r in range(n):
            hr[flat[r]] += rewards[r, j]
            hc[flat[r]] += cum_costs[r, j]
        # inclusive prefix sums along every axis
        for i in range(M):
            s = bstride[i]
            for idx in range(B):
                if (idx // s) % radix[i] > 0:
                    hr[idx] += hr[idx - s]
                    hc[idx] += hc[idx - s]
        for p in range(P):
            rem = p
            for i in range(M):
                tdig[i] = rem // tstride[i]
                rem -= tdig[i] * tstride[i]
            if j == M:
                idx = 0
                for i in range(M):
                    idx += tdig[i] * bstride[i]
                out_r[p] += hr[idx]
                out_c[p] += hc[idx]
            else:
                base = 0
                for i in range(M):
                    if i < j:
                        base += tdig[i] * bstride[i]
                    elif i > j:
                        base += (radix[i] - 1) * bstride[i]
                hi = base + (radix[j] - 1) * bstride[j]
                lo = base + tdig[j] * bstride[j]
                out_r[p] += hr[hi] - hr[lo]
                out_c[p] += hc[hi] - hc[lo]
    return out_r, out_c


def _stage_sums_numpy(bins, rewards, cum_costs, sizes):
    n, m = rewards.shape
    M = m - 1
    if M == 0:
        return np.array([rewards[:, 0].sum()]), np.array([cum_costs[:, 0].sum()], dtype=np.int64)
    sizes = np.asarray(sizes, dtype=np.int64)
    radix = tuple(int(s) + 1 for s in sizes)
    flat = np.ravel_multi_index(tuple(bins[:, i] for i in range(M)), radix)
    B = math.prod(radix)
    out_r = np.zeros(tuple(int(s) for s in sizes))
    out_c = np.zeros(tuple(int(s) for s in sizes), dtype=np.int64)
    for j in range(m):
        hr = np.bincount(flat, weights=rewards[:, j], minlength=B).reshape(radix)
        hc = np.zeros(B, dtype=np.int64)
        np.add.at(hc, flat, cum_costs[:, j])
        hc = hc.reshape(radix)
        for i in range(M):
            hr = np.cumsum(hr, axis=i)
            hc = np.cumsum(hc, axis=i)
        if j == M:
            sel = tuple(slice(0, int(sizes[i])) for i in range(M))
            out_r += hr[sel]
            out_c += hc[sel]
            continue
        head = tuple(slice(0, int(sizes[i])) for i in range(j))
        tail = tuple(radix[i] - 1 for i in range(j + 1, M))
        full = head + (radix[j] - 1,) + tail
        part = head + (slice(0, int(sizes[j])),) + tail
        dr = hr[full][..., None] - hr[part]
        dc = hc[full][..., None] - hc[part]
        shape = tuple(int(sizes[i]) for i in range(j + 1)) + (1,) * (M - j - 1)
        out_r += dr.reshape(shape)
        out_c += dc.reshape(shape)
    return out_r.ravel(), out_c.ravel()


def stage_sums(bins, rewards, cum_costs, sizes, backend: str | None = None):
    """Reward and cost totals over records for every threshold tuple (C-order flat).

    bins: int64 [n, m-1]; rewards: float64 [n, m] reward if stopping at step j;
    cum_costs: int64 [n, m] cost if stopping at step j; sizes: int64 [m-1] grid sizes.
    """
    bins = np.ascontiguousarray(bins, dtype=np.int64).reshape(rewards.shape[0], -1)
    rewards = np.ascontiguousarray(rewards, dtype=np.float64)
    cum_costs = np.ascontiguousarray(cum_costs, dtype=np.int64)
    sizes = np.ascontiguousarray(sizes, dtype=np.int64)
    if (backend or BACKEND) == "numba":
        return _stage_sums_numba(bins, rewards, cum_costs, sizes)
    return _stage_sums_numpy(bins, rewards, cum_costs, sizes)


# ---------------------------------------------------------------------------
# sparse logistic regression


@njit(cache=True)
def _margins_numba(indptr, indices, data, w, b):
    n = indptr.shape[0] - 1
    z = np.empty(n)
    for r in range(n):
        acc = b
        for k in range(indptr[r], indptr[r + 1]):
            acc += w[indices[k]] * data[k]
        z[r] = acc
    return z


def _margins_numpy(indptr, indices, data, w, b):
    n = indptr.shape[0] - 1
    row = np.repeat(np.arange(n), np.diff(indptr))
    return b + np.bincount(row, weights=w[indices] * data, minlength=n)


def margins(indptr, indices, data, w, b, backend: str | None = None):
    """Linear scores b + X @ w for a CSR matrix."""
    if (backend or BACKEND) == "numba":
        return _margins_numba(indptr, indices, data, w, float(b))
    return _margins_numpy(indptr, indices, data, w, float(b))


@njit(cache=True)
def _sgd_epoch_numba(indptr, indices, data, y, order, w, b, lr, l2, batch):
    n = order.shape[0]
    gb = 0.0
    touched = np.empty(indices.shape[0], dtype=np.int64)
    gvals = np.zeros(w.shape[0])
    for start in range(0, n, batch):
        stop = min(start + batch, n)
        size = stop - start
        gb = 0.0
        nt = 0
        for q in range(start, stop):
            r = order[q]
            z = b
            for k in range(indptr[r], indptr[r + 1]):
                z += w[indices[k]] * data[k]
            if z >= 0:
                p = 1.0 / (1.0 + math.exp(-z))
            else:
                e = math.exp(z)
                p = e / (1.0 + e)
            err = (p - y[r]) / size
            gb += err
            for k in range(indptr[r], indptr[r + 1]):
                c = indices[k]
                if gvals[c] == 0.0:
                    touched[nt] = c
                    nt += 1
                gvals[c] += err * data[k]
        if l2 > 0.0:
            decay = 1.0 - lr * l2
            for c in range(w.shape[0]):
                w[c] *= decay
        for q in range(nt):
            c = touched[q]
            w[c] -= lr * gvals[c]
            gvals[c] = 0.0
        b -= lr * gb
    return b


def _sgd_epoch_numpy(indptr, indices, data, y, order, w, b, lr, l2, batch):
    n = order.shape[0]
    lens_all = np.diff(indptr)
    for start in range(0, n, batch):
        rows = order[start:start + batch]
        lens = lens_all[rows]
        starts = indptr[rows]
        row_of = np.repeat(np.arange(len(rows)), lens)
        offs = np.repeat(starts - np.cumsum(lens) + lens, lens) + np.arange(lens.sum())
        cols = indices[offs]
        vals = data[offs]
        z = b + np.bincount(row_of, weights=w[cols] * vals, minlength=len(rows))
        p = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                     np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        err = (p - y[rows]) / len(rows)
        g = np.bincount(cols, weights=err[row_of] * vals, minlength=w.shape[0])
        if l2 > 0.0:
            w *= 1.0 - lr * l2
        w -= lr * g
        b -= lr * err.sum()
    return b


def sgd_epoch(indptr, indices, data, y, order, w, b, lr, l2, batch, backend: str | None = None):
    """One pass of mini-batch gradient descent; updates ``w`` in place, returns new bias."""
    if (backend or BACKEND) == "numba":
        return _sgd_epoch_numba(indptr, indices, data, y, order, w, float(b), float(lr),
                                float(l2), int(batch))
    return _sgd_epoch_numpy(indptr, indices, data, y, order, w, float(b), float(lr),
                            float(l2), int(batch))


def logistic_loss(indptr, indices, data, y, w, b, l2, backend: str | None = None) -> float:
    """Mean logistic loss plus (l2/2)*||w||^2 (bias unpenalized)."""
    z = margins(indptr, indices, data, w, b, backend)
    per = np.where(y > 0.5, np.logaddexp(0.0, -z), np.logaddexp(0.0, z))
    return float(per.mean() + 0.5 * l2 * np.dot(w, w))
