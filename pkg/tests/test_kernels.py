import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssrec import _fallback, kernels

compiled = pytest.importorskip("ssrec._kernels")


def random_csr(rng, n_rows, n_cols, density=0.3):
    mask = rng.random((n_rows, n_cols)) < density
    indptr = np.r_[0, np.cumsum(mask.sum(axis=1))].astype(np.int64)
    indices = np.nonzero(mask)[1].astype(np.int64)
    return indptr, indices, mask


def test_backend_flag():
    assert kernels.BACKEND in ("compiled", "python")


@given(st.integers(1, 30), st.integers(1, 30), st.integers(1, 5), st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_csr_matmat_matches_dense_on_both_backends(n, m, d, seed):
    rng = np.random.default_rng(seed)
    indptr, indices, mask = random_csr(rng, n, m)
    data = rng.standard_normal(len(indices))
    X = rng.standard_normal((m, d))
    dense = np.zeros((n, m))
    dense[mask] = data
    a = kernels.csr_matmat(indptr, indices, data, X, impl=compiled)
    b = kernels.csr_matmat(indptr, indices, data, X, impl=_fallback)
    np.testing.assert_allclose(a, dense @ X, atol=1e-12)
    np.testing.assert_array_equal(a, b)


@given(st.integers(1, 20), st.integers(1, 25), st.integers(1, 6), st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_first_free_candidate_backends_agree(n_users, n_items, n_cand, seed):
    rng = np.random.default_rng(seed)
    indptr, indices, mask = random_csr(rng, n_users, n_items, 0.5)
    users = rng.integers(0, n_users, 40)
    cand = rng.integers(0, n_items, (40, n_cand))
    a = kernels.first_free_candidate(users, cand, indptr, indices, impl=compiled)
    b = kernels.first_free_candidate(users, cand, indptr, indices, impl=_fallback)
    np.testing.assert_array_equal(a, b)
    for r, u in enumerate(users):
        free = [c for c in cand[r] if not mask[u, c]]
        assert a[r] == (free[0] if free else -1)


@given(st.integers(1, 10), st.integers(1, 30), st.integers(1, 12), st.integers(0, 2**31))
@settings(max_examples=60, deadline=None)
def test_topk_excluding_backends_agree_with_ties(n, m, k, seed):
    rng = np.random.default_rng(seed)
    indptr, indices, mask = random_csr(rng, n, m, 0.3)
    scores = rng.integers(0, 4, (n, m)).astype(float)   # many ties
    rows = np.arange(n)
    a = kernels.topk_excluding(scores, rows, indptr, indices, k, impl=compiled)
    b = kernels.topk_excluding(scores, rows, indptr, indices, k, impl=_fallback)
    np.testing.assert_array_equal(a, b)
    for r in range(n):
        cols = [c for c in range(m) if not mask[r, c]]
        want = sorted(cols, key=lambda c: (-scores[r, c], c))[:k]
        assert a[r, :len(want)].tolist() == want
        assert np.all(a[r, len(want):] == -1)


def test_empty_row_paths():
    indptr = np.array([0, 0], dtype=np.int64)
    indices = np.zeros(0, dtype=np.int64)
    X = np.ones((3, 2))
    for impl in (compiled, _fallback):
        assert np.all(kernels.csr_matmat(indptr, indices, np.zeros(0), X, impl=impl) == 0)
        out = kernels.first_free_candidate([0], np.zeros((1, 0), dtype=np.int64), indptr, indices, impl=impl)
        assert out.tolist() == [-1]
