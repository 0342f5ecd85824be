import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ssrec import evaluator as ev
from ssrec.graph import InteractionTable
from ssrec.spectral import BandStack


def brute_metrics(Z, n_users, train, target, k):
    """Oracle: sort all candidates per user by score (ties by index) with plain python."""
    n_items = Z.shape[0] - n_users
    rec, nd = [], []
    for u in sorted(set(target.users.tolist())):
        seen = {int(i) for uu, i in zip(train.users, train.items) if uu == u}
        rel = {int(i) for uu, i in zip(target.users, target.items) if uu == u}
        cand = [i for i in range(n_items) if i not in seen]
        scores = {i: float(Z[u] @ Z[n_users + i]) for i in cand}
        ranked = sorted(cand, key=lambda i: (-scores[i], i))[:k]
        hits = [r for r, i in enumerate(ranked, 1) if i in rel]
        rec.append(len(hits) / len(rel))
        idcg = sum(1 / math.log2(r + 1) for r in range(1, min(k, len(rel)) + 1))
        nd.append(sum(1 / math.log2(r + 1) for r in hits) / idcg)
    return float(np.mean(rec)), float(np.mean(nd))


def test_recall_ndcg_examples():
    assert ev.recall_at_k([3, 1, 2], [3, 9], 10) == 0.5
    assert ev.recall_at_k([4, 2, 0], [2, 4], 2) == 1.0
    assert ev.ndcg_at_k([7, 1, 2], [7], 10) == 1.0
    assert abs(ev.ndcg_at_k([1, 7, 2], [7], 10) - 1 / math.log2(3)) < 1e-15
    assert abs(1 / math.log2(3) - 0.6309297536) < 1e-9
    assert ev.ndcg_at_k([1, 2, 7], [7], 2) == 0.0
    with pytest.raises(ValueError):
        ev.recall_at_k([1], [1], 0)


def test_full_rank_scores_exclusion_and_ties():
    Z = np.array([[1.0], [3.0], [1.0], [1.0]])           # user 0; items score 3, 1, 1
    assert ev.full_rank_scores(Z, 0, 1).tolist() == [0, 1, 2]
    assert ev.full_rank_scores(Z, 0, 1, exclude=[0]).tolist() == [1, 2]
    assert ev.full_rank_scores(np.ones((4, 2)), 0, 1).tolist() == [0, 1, 2]


@pytest.mark.parametrize("seed", range(50))
def test_metrics_match_brute_force_oracle(seed):
    rng = np.random.default_rng(seed)
    n_users, n_items, d = int(rng.integers(2, 8)), int(rng.integers(5, 25)), 3
    Z = np.round(rng.standard_normal((n_users + n_items, d)), 1)   # rounding makes ties likely
    pairs = {(int(rng.integers(n_users)), int(rng.integers(n_items))) for _ in range(3 * n_users + 5)}
    pairs = sorted(pairs)
    perm = rng.permutation(len(pairs))
    cut = len(pairs) * 2 // 3
    mk = lambda rows: InteractionTable([pairs[r][0] for r in rows], [pairs[r][1] for r in rows],  # noqa: E731
                                       [0] * len(rows))
    train, target = mk(perm[:cut]), mk(perm[cut:])
    for k in (1, 3, 10):
        got = ev.evaluate_ranking(Z, n_users, train, target, ks=(k,))
        r, n = brute_metrics(Z, n_users, train, target, k)
        assert got.recall[k] == pytest.approx(r, abs=1e-12)
        assert got.ndcg[k] == pytest.approx(n, abs=1e-12)
        assert 0 <= got.recall[k] <= 1 and 0 <= got.ndcg[k] <= 1


def test_evaluate_users_without_targets_and_subset():
    Z = np.eye(5)
    train = InteractionTable([0], [0], [0])
    target = InteractionTable([1], [2], [0])
    m = ev.evaluate_ranking(Z, 2, train, target)
    assert m.n_users_evaluated == 1
    empty = ev.evaluate_ranking(Z, 2, train, target, users=[0])
    assert empty.n_users_evaluated == 0 and empty.recall == {10: 0.0, 20: 0.0}
    assert m.to_json()["recall"].keys() == {"10", "20"}


def test_cold_start_boundary():
    users = [0] * 3 + [1] * 6 + [2] * 5
    t = InteractionTable(users, np.arange(len(users)), np.zeros(len(users)))
    assert ev.cold_start_filter(t, 4).tolist() == [0, 2, 3]


def test_center_distances_geometry():
    n_users = 1
    data = np.zeros((3, 3, 2))
    data[1:, 0] = [1, 0]          # id centre
    data[1:, 1] = [0, 1]          # img centre
    data[1:, 2] = [0, 0]          # txt centre
    st_ = BandStack(data, [("id", 1), ("img", 1), ("txt", 1)])
    D = ev.modality_center_distances(st_, n_users)[1]
    assert D[0, 1] == pytest.approx(math.sqrt(2)) and D[0, 2] == 1.0
    assert np.array_equal(D, D.T) and not np.diag(D).any()
    same = BandStack(np.ones((3, 3, 2)), st_.band_axis_map)
    assert not ev.modality_center_distances(same, n_users)[1].any()
    assert np.abs(ev.modality_center_distances(same, n_users, metric="cosine")[1]).max() < 1e-12


@given(st.integers(0, 2**31))
@settings(max_examples=25, deadline=None)
def test_center_distance_matrices_symmetric(seed):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((9, 6, 3))
    st_ = BandStack(data, [(c, m) for c in ("id", "img", "txt") for m in (1, 2)])
    for metric in ("euclidean", "cosine"):
        for D in ev.modality_center_distances(st_, 4, metric).values():
            assert np.array_equal(D, D.T) and not np.diag(D).any() and np.all(D >= 0)


def test_gate_rows():
    alpha = np.full((3, 4), 0.25)
    rows = ev.gate_distribution_rows(alpha, [0, 2], [2], [("id", 1), ("id", 2), ("img", 1), ("img", 2)])
    assert len(rows) == 2 * 4
    assert {r[3] for r in rows if r[0] == 2} == {1} and {r[3] for r in rows if r[0] == 0} == {0}
    assert sum(r[2] for r in rows if r[0] == 0) == pytest.approx(1.0)
    assert rows[1][1] == "id:2"
