# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops.

Every function here has a numpy twin in ``_fallback.py`` producing
bit-identical output; ``kernels.py`` picks one at import time.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def csr_matmat(const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices,
               const double[::1] data, const double[:, ::1] X):
    """Y = A @ X for CSR ``A`` and dense row-major ``X``."""
    cdef Py_ssize_t n = indptr.shape[0] - 1
    cdef Py_ssize_t d = X.shape[1]
    cdef Py_ssize_t i, j, c
    cdef cnp.int64_t col
    cdef double w
    out = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] Y = out
    for i in range(n):
        for j in range(indptr[i], indptr[i + 1]):
            col = indices[j]
            w = data[j]
            for c in range(d):
                Y[i, c] += w * X[col, c]
    return out


cdef inline bint _contains(const cnp.int64_t[::1] indices, cnp.int64_t lo,
                           cnp.int64_t hi, cnp.int64_t value) nogil:
    # binary search in the sorted slice indices[lo:hi]
    cdef cnp.int64_t mid, end = hi
    while lo < hi:
        mid = (lo + hi) >> 1
        if indices[mid] < value:
            lo = mid + 1
        else:
            hi = mid
    return lo < end and indices[lo] == value


def first_free_candidate(const cnp.int64_t[::1] users, const cnp.int64_t[:, ::1] cand,
                         const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices):
    """For each row pick the first candidate item not in the user's sorted item list.

    Returns -1 where every candidate collides.
    """
    cdef Py_ssize_t n = cand.shape[0]
    cdef Py_ssize_t t = cand.shape[1]
    cdef Py_ssize_t i, j
    cdef cnp.int64_t u, lo, hi, item
    out = np.full(n, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] res = out
    with nogil:
        for i in range(n):
            u = users[i]
            lo = indptr[u]
            hi = indptr[u + 1]
            for j in range(t):
                item = cand[i, j]
                if not (hi > lo and _contains(indices, lo, hi, item)):
                    res[i] = item
                    break
    return out


cdef inline bint _before(double sa, cnp.int64_t ia, double sb, cnp.int64_t ib) nogil:
    # ranking order: higher score first, ties by smaller index
    return sa > sb or (sa == sb and ia < ib)


def topk_excluding(const double[:, ::1] scores, const cnp.int64_t[::1] rows,
                   const cnp.int64_t[::1] indptr, const cnp.int64_t[::1] indices,
                   Py_ssize_t k):
    """Top-``k`` columns per row of ``scores``, skipping columns listed for that row.

    ``rows[i]`` selects the exclusion list ``indices[indptr[r]:indptr[r+1]]``
    (sorted). Short rows are padded with -1.
    """
    cdef Py_ssize_t n = scores.shape[0]
    cdef Py_ssize_t m = scores.shape[1]
    cdef Py_ssize_t i, j, filled, pos
    cdef cnp.int64_t r, lo, hi
    cdef double s
    out = np.full((n, k), -1, dtype=np.int64)
    cdef cnp.int64_t[:, ::1] top = out
    buf_s = np.empty(max(k, 1), dtype=np.float64)
    cdef double[::1] bs = buf_s
    with nogil:
        for i in range(n):
            r = rows[i]
            lo = indptr[r]
            hi = indptr[r + 1]
            filled = 0
            for j in range(m):
                if hi > lo and _contains(indices, lo, hi, j):
                    continue
                s = scores[i, j]
                if filled == k:
                    if not _before(s, j, bs[k - 1], top[i, k - 1]):
                        continue
                    pos = k - 1
                else:
                    pos = filled
                    filled += 1
                while pos > 0 and _before(s, j, bs[pos - 1], top[i, pos - 1]):
                    bs[pos] = bs[pos - 1]
                    top[i, pos] = top[i, pos - 1]
                    pos -= 1
                bs[pos] = s
                top[i, pos] = j
    return out
