from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_graph, random_table
from ssrec import spectral
from ssrec.errors import ConvergenceError, DataError
from ssrec.graph import InteractionTable, SparseSymmetricMatrix, build_graph, normalized_laplacian


def greedy_oracle(energies, M):
    """Exact-arithmetic restatement of the boundary rule on integer energies."""
    E = [Fraction(int(e)) for e in energies]
    K, T = len(E), sum(E)
    b = [0]
    for m in range(1, M):
        lo, hi = b[-1] + 1, K - (M - m)
        pick = hi
        for j in range(lo, hi + 1):
            if sum(E[:j]) >= Fraction(m) * T / M:
                pick = j
                break
        b.append(pick)
    return b + [K]


def test_two_node_closed_form():
    L = SparseSymmetricMatrix.from_coo(2, [0, 0, 1, 1], [0, 1, 0, 1], [1.0, -1.0, -1.0, 1.0])
    sp = spectral.eigendecompose(L)
    np.testing.assert_allclose(sp.eigenvalues, [0.0, 2.0], atol=1e-14)
    r = 1 / np.sqrt(2)
    np.testing.assert_allclose(np.abs(sp.eigenvectors), r, atol=1e-14)
    # sign rule: the largest-magnitude entry is positive; first such entry wins ties
    assert sp.eigenvectors[0, 0] > 0 and sp.eigenvectors[0, 1] > 0
    Xhat = spectral.gft_forward(sp, np.ones((2, 1)))
    np.testing.assert_allclose(Xhat.ravel(), [np.sqrt(2), 0.0], atol=1e-14)


def test_identity_matrix_orthonormal_basis():
    L = SparseSymmetricMatrix.from_coo(5, range(5), range(5), np.ones(5))
    sp = spectral.eigendecompose(L)
    np.testing.assert_allclose(sp.eigenvalues, 1.0)
    np.testing.assert_allclose(sp.eigenvectors.T @ sp.eigenvectors, np.eye(5), atol=1e-14)


def test_full_mode_refuses_over_limit(rng):
    L = normalized_laplacian(random_graph(rng, 30))
    with pytest.raises(DataError, match="truncated"):
        spectral.eigendecompose(L, "full", dense_limit=10)


@given(st.integers(6, 80), st.integers(0, 2**31))
@settings(max_examples=25, deadline=None)
def test_spectrum_invariants(n, seed):
    rng = np.random.default_rng(seed)
    sp = spectral.eigendecompose(normalized_laplacian(random_graph(rng, n)))
    lam = sp.eigenvalues
    assert np.all(np.diff(lam) >= 0)
    assert lam[0] >= -1e-9 and lam[-1] <= 2 + 1e-9
    U = sp.eigenvectors
    assert np.max(np.abs(U.T @ U - np.eye(U.shape[1]))) <= 1e-8
    top = np.argmax(np.abs(U), axis=0)
    assert np.all(U[top, np.arange(U.shape[1])] > 0)


def test_gft_roundtrip_parseval_and_span(rng):
    sp = spectral.eigendecompose(normalized_laplacian(random_graph(rng, 60)))
    X = rng.standard_normal((60, 7))
    Xhat = spectral.gft_forward(sp, X)
    assert np.linalg.norm(spectral.gft_inverse(sp, Xhat) - X) <= 1e-8 * np.linalg.norm(X)
    E = spectral.band_energies(Xhat)
    assert abs(E.sum() - np.sum(X * X)) <= 1e-8 * np.sum(X * X)
    x1 = np.outer(sp.eigenvectors[:, 0], [2.0, -1.0])
    h = spectral.gft_forward(sp, x1)
    np.testing.assert_allclose(h[1:], 0.0, atol=1e-12)
    with pytest.raises(DataError):
        spectral.gft_forward(sp, X[:5])


def test_band_energies_examples():
    E = spectral.band_energies(np.array([[0.0, 0.0], [3.0, 4.0]]))
    assert E.tolist() == [0.0, 25.0]


def test_partition_examples():
    p = spectral.partition_bands([4, 1, 1, 1, 1], 2)
    assert p.boundaries.tolist() == [0, 1, 5] and p.band_energies.tolist() == [4.0, 4.0]
    p = spectral.partition_bands(np.ones(8), 4)
    assert p.boundaries.tolist() == [0, 2, 4, 6, 8] and np.all(p.band_energies == 2.0)
    p = spectral.partition_bands([1, 1, 1], 3)
    assert p.boundaries.tolist() == [0, 1, 2, 3]
    p = spectral.partition_bands(np.zeros(7), 3)
    assert p.equal_count_fallback and p.boundaries.tolist() == [0, 2, 4, 7]
    with pytest.raises(DataError):
        spectral.partition_bands([1, 1], 3)
    with pytest.raises(DataError):
        spectral.partition_bands([1, 1], 1)
    with pytest.raises(IndexError):
        p.modes(4)


@given(st.lists(st.integers(0, 50), min_size=2, max_size=40), st.integers(2, 8))
@settings(max_examples=200, deadline=None)
def test_partition_matches_exact_oracle(energies, M):
    if len(energies) < M or sum(energies) == 0:
        return
    p = spectral.partition_bands(np.array(energies, dtype=float), M)
    assert p.boundaries.tolist() == greedy_oracle(energies, M)
    # contiguous, non-empty, covering, energies consistent
    assert np.all(np.diff(p.boundaries) >= 1)
    np.testing.assert_allclose(p.band_energies.sum(), sum(energies))


def test_partition_json_roundtrip():
    p = spectral.partition_bands([5, 1, 2, 2, 0.5], 3, residual=True, residual_energy=1.5)
    q = spectral.BandPartition.from_json(p.to_json())
    assert q.to_json() == p.to_json() and q.residual


def test_bands_complete_and_orthogonal(rng):
    sp = spectral.eigendecompose(normalized_laplacian(random_graph(rng, 70)))
    X = rng.standard_normal((70, 5))
    part = spectral.signal_partition(sp, X, 4)
    comps = spectral.band_components(sp, X, part)
    assert np.linalg.norm(comps.sum(0) - X) <= 1e-6 * np.linalg.norm(X)
    for a in range(4):
        for b in range(a + 1, 4):
            assert abs(np.sum(comps[a] * comps[b])) <= 1e-6 * np.sum(X * X)
    # a signal inside band 1's span stays there
    Y = sp.eigenvectors[:, part.modes(1)] @ rng.standard_normal((len(part.modes(1)), 3))
    c = spectral.band_components(sp, Y, part)
    np.testing.assert_allclose(c[0], Y, atol=1e-12)
    np.testing.assert_allclose(c[1:], 0.0, atol=1e-12)


def test_lanczos_matches_dense_on_50_nodes(rng):
    L = normalized_laplacian(random_graph(rng, 50))
    full = spectral.eigendecompose(L)
    tr = spectral.eigendecompose(L, "truncated", k=10, seed=3)
    assert tr.truncated and tr.residual_projector_present
    assert np.max(np.abs(tr.eigenvalues - full.eigenvalues[:10])) <= 1e-6


def test_lanczos_finds_repeated_eigenvalues():
    # two identical disconnected copies: every eigenvalue appears twice
    rng = np.random.default_rng(5)
    t = random_table(rng, 6, 5, 0.5)
    both = InteractionTable(np.r_[t.users, t.users + 6], np.r_[t.items, t.items + 5],
                            np.r_[t.timestamps, t.timestamps])
    L = normalized_laplacian(build_graph(both, 12, 10))
    full = np.linalg.eigvalsh(L.to_dense())
    vals, U = spectral.lanczos_smallest(L.matmat, 22, 6, seed=0)
    np.testing.assert_allclose(vals, full[:6], atol=1e-8)
    assert abs(vals[0]) < 1e-8 and abs(vals[1]) < 1e-8
    np.testing.assert_allclose(U.T @ U, np.eye(6), atol=1e-8)


def test_lanczos_reports_nonconvergence(rng):
    L = normalized_laplacian(random_graph(rng, 120, 0.1))
    with pytest.raises(ConvergenceError) as exc:
        spectral.lanczos_smallest(L.matmat, 120, 8, tol=1e-14, max_iter=12)
    assert exc.value.residuals is not None and len(exc.value.residuals) == 8


def test_truncated_bands_keep_completeness(rng):
    L = normalized_laplacian(random_graph(rng, 80))
    sp = spectral.eigendecompose(L, "truncated", k=12, seed=1)
    X = rng.standard_normal((80, 4))
    part = spectral.signal_partition(sp, X, 3)
    assert part.residual
    comps = spectral.band_components(sp, X, part)
    assert np.linalg.norm(comps.sum(0) - X) <= 1e-6 * np.linalg.norm(X)
    np.testing.assert_allclose(part.band_energies.sum(), np.sum(X * X), rtol=1e-10)
    with pytest.raises(DataError):
        spectral.reconstruct_band(sp, spectral.gft_forward(sp, X), part, 3)


def test_band_stack_layout(rng):
    sp = spectral.eigendecompose(normalized_laplacian(random_graph(rng, 30)))
    sigs = {c: rng.standard_normal((30, 4)) for c in ("id", "img", "txt")}
    stack, parts = spectral.build_band_stack(sigs, sp, 4)
    assert stack.B == 12 and stack.data.shape == (30, 12, 4)
    assert stack.band_axis_map[:2] == [("id", 1), ("id", 2)] and stack.index("txt", 4) == 11
    for c, X in sigs.items():
        assert np.linalg.norm(stack.data[:, stack.modality_bands(c)].sum(1) - X) <= 1e-6 * np.linalg.norm(X)
    single, _ = spectral.build_band_stack({"id": sigs["id"]}, sp, 2)
    assert single.band_axis_map == [("id", 1), ("id", 2)]
    shared, sp_parts = spectral.build_band_stack(sigs, sp, 4, shared=True)
    assert len({tuple(p.boundaries) for p in sp_parts.values()}) == 1
    with pytest.raises(DataError):
        spectral.build_band_stack({"a": sigs["id"], "b": sigs["img"][:, :2]}, sp, 2)


def test_band_report_rows(rng):
    sp = spectral.eigendecompose(normalized_laplacian(random_graph(rng, 30)))
    X = rng.standard_normal((30, 3))
    parts = spectral.fit_partitions({"img": X}, sp, 3)
    rows = spectral.band_report(sp, {"img": X}, parts)
    assert [r[1] for r in rows] == [1, 2, 3]
    assert sum(r[2] for r in rows) == 30
    np.testing.assert_allclose(sum(r[6] for r in rows), 1.0)
