"""Pure numpy versions of the compiled kernels (same outputs, bit for bit)."""

import numpy as np


def csr_matmat(indptr, indices, data, X):
    n = len(indptr) - 1
    out = np.zeros((n, X.shape[1]), dtype=np.float64)
    rows = np.repeat(np.arange(n), np.diff(indptr))
    # add.at accumulates in nnz order, matching the compiled loop
    np.add.at(out, rows, data[:, None] * X[indices])
    return out


def _member(users, items, indptr, indices):
    # (user, item) -> single sorted key; rows of a CSR with sorted columns are globally sorted
    if len(indices) == 0:
        return np.zeros(items.shape, dtype=bool)
    base = int(max(indices.max(), items.max())) + 1
    owners = np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))
    keys = owners * base + indices
    probe = users.reshape(-1, *([1] * (items.ndim - 1))) * base + items
    pos = np.minimum(np.searchsorted(keys, probe), len(keys) - 1)
    return keys[pos] == probe


def first_free_candidate(users, cand, indptr, indices):
    out = np.full(cand.shape[0], -1, dtype=np.int64)
    if cand.size == 0:
        return out
    taken = _member(users, cand, indptr, indices)
    free = ~taken
    has = free.any(axis=1)
    first = free.argmax(axis=1)
    out[has] = cand[has, first[has]]
    return out


def topk_excluding(scores, rows, indptr, indices, k):
    n, m = scores.shape
    out = np.full((n, k), -1, dtype=np.int64)
    for i in range(n):
        r = rows[i]
        excl = indices[indptr[r]:indptr[r + 1]]
        keep = np.ones(m, dtype=bool)
        keep[excl] = False
        cols = np.flatnonzero(keep)
        # stable sort on the negated score keeps ties in ascending column order
        order = cols[np.argsort(-scores[i, cols], kind="stable")][:k]
        out[i, : len(order)] = order
    return out
