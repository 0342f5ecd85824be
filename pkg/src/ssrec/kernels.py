"""Hot-loop kernels: compiled extension when available, numpy otherwise.

Set ``SSREC_PURE=1`` to force the numpy path (used by the benchmark and by
the backend-equivalence tests).
"""

import os

import numpy as np

from . import _fallback

try:
    if os.environ.get("SSREC_PURE"):
        raise ImportError("pure backend requested")
    from . import _kernels as _impl

    BACKEND = "compiled"
except ImportError:
    _impl = _fallback
    BACKEND = "python"


def _i64(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def csr_matmat(indptr, indices, data, X, impl=None):
    impl = impl or _impl
    X = _f64(X)
    squeeze = X.ndim == 1
    if squeeze:
        X = X[:, None]
    out = impl.csr_matmat(_i64(indptr), _i64(indices), _f64(data), X)
    return out[:, 0] if squeeze else out


def first_free_candidate(users, cand, indptr, indices, impl=None):
    impl = impl or _impl
    return impl.first_free_candidate(_i64(users), _i64(cand), _i64(indptr), _i64(indices))


def topk_excluding(scores, rows, indptr, indices, k, impl=None):
    impl = impl or _impl
    return impl.topk_excluding(_f64(scores), _i64(rows), _i64(indptr), _i64(indices), int(k))
