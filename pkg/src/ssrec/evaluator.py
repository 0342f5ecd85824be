"""Full-ranking metrics, cold-start slicing and spectral diagnostics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

COLD_START_MAX = 5


@dataclass
class RankingMetrics:
    recall: dict = field(default_factory=dict)
    ndcg: dict = field(default_factory=dict)
    n_users_evaluated: int = 0

    def to_json(self):
        return {"recall": {str(k): v for k, v in self.recall.items()},
                "ndcg": {str(k): v for k, v in self.ndcg.items()},
                "n_users": self.n_users_evaluated}


def recall_at_k(ranking, relevant, K) -> float:
    if K < 1:
        raise ValueError("K must be >= 1")
    relevant = set(int(r) for r in relevant)
    hits = sum(1 for i in list(ranking)[:K] if int(i) in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranking, relevant, K) -> float:
    if K < 1:
        raise ValueError("K must be >= 1")
    relevant = set(int(r) for r in relevant)
    dcg = sum(1.0 / math.log2(rank + 1)
              for rank, i in enumerate(list(ranking)[:K], start=1) if int(i) in relevant)
    idcg = sum(1.0 / math.log2(i + 1) for i in range(1, min(K, len(relevant)) + 1))
    return dcg / idcg


def full_rank_scores(Z, user, n_users, exclude=()) -> np.ndarray:
    """Every non-excluded item for ``user``, best first; ties by item index."""
    logits = Z[n_users:] @ Z[user]
    keep = np.ones(len(logits), dtype=bool)
    keep[np.asarray(list(exclude), dtype=np.int64)] = False
    cols = np.flatnonzero(keep)
    return cols[np.argsort(-logits[cols], kind="stable")]


def topk_items(Z, users, n_users, excl_indptr, excl_indices, k) -> np.ndarray:
    """Top-``k`` item indices per user, skipping that user's excluded items.

    Ranks by ``z_u . z_v``; the sigmoid is monotone, so the order matches the
    predicted probabilities without their saturation ties.
    """
    users = np.asarray(users, dtype=np.int64)
    scores = Z[users] @ Z[n_users:].T
    return kernels.topk_excluding(scores, users, excl_indptr, excl_indices, k)


def _csr_from_pairs(n_rows, rows, cols):
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    keep = np.ones(len(rows), dtype=bool)
    keep[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
    rows, cols = rows[keep], cols[keep]
    indptr = np.zeros(n_rows + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    return np.cumsum(indptr), cols


def evaluate_ranking(Z, n_users, train_table, target_table, ks=(10, 20), users=None) -> RankingMetrics:
    """Recall@K / NDCG@K averaged over users with at least one target interaction."""
    excl_ptr, excl_idx = _csr_from_pairs(n_users, train_table.users, train_table.items)
    tgt_ptr, tgt_idx = _csr_from_pairs(n_users, target_table.users, target_table.items)
    has = np.diff(tgt_ptr) > 0
    if users is not None:
        sel = np.zeros(n_users, dtype=bool)
        sel[np.asarray(list(users), dtype=np.int64)] = True
        has &= sel
    eval_users = np.flatnonzero(has)
    metrics = RankingMetrics(n_users_evaluated=int(len(eval_users)))
    if len(eval_users) == 0:
        metrics.recall = {k: 0.0 for k in ks}
        metrics.ndcg = {k: 0.0 for k in ks}
        return metrics
    kmax = max(ks)
    top = topk_items(Z, eval_users, n_users, excl_ptr, excl_idx, kmax)
    discounts = 1.0 / np.log2(np.arange(2, kmax + 2))
    rec = {k: [] for k in ks}
    ndcg = {k: [] for k in ks}
    for row, u in zip(top, eval_users):
        rel = tgt_idx[tgt_ptr[u]:tgt_ptr[u + 1]]
        hit = np.isin(row, rel) & (row >= 0)
        for k in ks:
            h = hit[:k]
            rec[k].append(h.sum() / len(rel))
            idcg = discounts[: min(k, len(rel))].sum()
            ndcg[k].append(float(discounts[:k][h].sum() / idcg))
    metrics.recall = {k: float(np.mean(v)) for k, v in rec.items()}
    metrics.ndcg = {k: float(np.mean(v)) for k, v in ndcg.items()}
    return metrics


def train_counts(train_table, n_users) -> np.ndarray:
    return np.bincount(train_table.users, minlength=n_users)


def cold_start_filter(train_table, n_users, threshold=COLD_START_MAX) -> np.ndarray:
    """Users with at most ``threshold`` train interactions."""
    return np.flatnonzero(train_counts(train_table, n_users) <= threshold)


# --- diagnostics -------------------------------------------------------------

def modality_center_distances(stack, n_users, metric="euclidean") -> dict:
    """Per band: distances between the item-mean vectors of each modality."""
    data = stack.data
    mods = stack.modalities
    bands = sorted({m for _, m in stack.band_axis_map})
    out = {}
    for m in bands:
        centers = np.stack([data[n_users:, stack.index(c, m)].mean(axis=0) for c in mods])
        k = len(mods)
        D = np.zeros((k, k))
        for i in range(k):
            for j in range(i + 1, k):
                if metric == "euclidean":
                    dist = float(np.linalg.norm(centers[i] - centers[j]))
                elif metric == "cosine":
                    ni, nj = np.linalg.norm(centers[i]), np.linalg.norm(centers[j])
                    dist = 0.0 if ni == 0 or nj == 0 else 1.0 - float(centers[i] @ centers[j] / (ni * nj))
                else:
                    raise ValueError(f"unknown distance {metric!r}")
                D[i, j] = D[j, i] = dist
        out[m] = D
    return out


def center_distance_rows(distances: dict, modalities):
    rows = []
    for m, D in distances.items():
        for i, a in enumerate(modalities):
            for j, b in enumerate(modalities):
                rows.append((m, a, b, float(D[i, j])))
    return rows


def gate_distribution_rows(alpha, users, cold_users, band_axis_map):
    """(user, band label, weight, cold flag) for every user and extended band."""
    cold = set(int(u) for u in cold_users)
    labels = [f"{c}:{m}" for c, m in band_axis_map]
    rows = []
    for u in users:
        flag = int(int(u) in cold)
        for b, lab in enumerate(labels):
            rows.append((int(u), lab, float(alpha[u, b]), flag))
    return rows


def band_energy_rows(stack, n_users):
    """Mean per-node energy of each (modality, band) slice, split into users and items."""
    rows = []
    E = np.einsum("nbd,nbd->nb", stack.data, stack.data)
    for b, (c, m) in enumerate(stack.band_axis_map):
        rows.append((c, m, float(E[:n_users, b].mean()), float(E[n_users:, b].mean())))
    return rows
