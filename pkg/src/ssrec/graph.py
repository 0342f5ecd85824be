"""User-item bipartite graph, its normalized Laplacian and modality propagation.

Node layout is fixed everywhere in the package: users occupy ``[0, n_users)``
and items ``[n_users, n_users + n_items)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DataError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class InteractionTable:
    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        for name in ("users", "items", "timestamps"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        if not (len(self.users) == len(self.items) == len(self.timestamps)):
            raise DataError("interaction columns have different lengths")
        if len(self.timestamps) and self.timestamps.min() < 0:
            raise DataError(f"negative timestamp at record {int(np.argmin(self.timestamps))}")

    def __len__(self):
        return len(self.users)

    @classmethod
    def from_records(cls, records) -> InteractionTable:
        arr = np.asarray(list(records), dtype=np.int64).reshape(-1, 3)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2])

    def subset(self, idx) -> InteractionTable:
        return InteractionTable(self.users[idx], self.items[idx], self.timestamps[idx])

    def deduplicated(self) -> InteractionTable:
        """Keep one record per (user, item): the earliest, ties by input order."""
        if len(self) == 0:
            return self
        order = np.lexsort((np.arange(len(self)), self.timestamps, self.items, self.users))
        u, i = self.users[order], self.items[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = (u[1:] != u[:-1]) | (i[1:] != i[:-1])
        keep = np.sort(order[first])
        return self.subset(keep)


@dataclass(frozen=True)
class SparseSymmetricMatrix:
    """CSR storage with sorted column indices per row."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray

    @classmethod
    def from_coo(cls, n, rows, cols, vals) -> SparseSymmetricMatrix:
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if len(rows) > 1 and np.any((rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])):
            raise DataError("duplicate entries in sparse matrix")
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, rows + 1, 1)
        return cls(n, np.cumsum(indptr), cols, vals)

    @property
    def nnz(self):
        return len(self.indices)

    def row_ids(self):
        return np.repeat(np.arange(self.n), np.diff(self.indptr))

    def matmat(self, X):
        return kernels.csr_matmat(self.indptr, self.indices, self.values, X)

    def __matmul__(self, X):
        return self.matmat(X)

    def to_dense(self):
        out = np.zeros((self.n, self.n))
        out[self.row_ids(), self.indices] = self.values
        return out

    def diagonal(self):
        out = np.zeros(self.n)
        rows = self.row_ids()
        on = rows == self.indices
        out[rows[on]] = self.values[on]
        return out

    def row_sums(self):
        return np.bincount(self.row_ids(), weights=self.values, minlength=self.n)

    def is_symmetric(self, tol=1e-12):
        rows = self.row_ids()
        fwd = rows * self.n + self.indices
        bwd = self.indices * self.n + rows
        order = np.argsort(bwd)
        if not np.array_equal(fwd, bwd[order]):
            return False
        return bool(np.all(np.abs(self.values - self.values[order]) <= tol))


@dataclass(frozen=True)
class BipartiteGraph:
    n_users: int
    n_items: int
    adjacency: SparseSymmetricMatrix
    degrees: np.ndarray = field(repr=False)

    @property
    def n_nodes(self):
        return self.n_users + self.n_items

    def user_item_csr(self):
        """(indptr, item indices) of each user's neighbours, items re-based to 0."""
        end = self.adjacency.indptr[self.n_users]
        return self.adjacency.indptr[: self.n_users + 1], self.adjacency.indices[:end] - self.n_users


def build_graph(table: InteractionTable, n_users: int, n_items: int) -> BipartiteGraph:
    if len(table) == 0:
        raise DataError("interaction table is empty")
    bad = np.flatnonzero((table.users < 0) | (table.users >= n_users)
                         | (table.items < 0) | (table.items >= n_items))
    if len(bad):
        r = int(bad[0])
        raise DataError(f"record {r} out of range: user={table.users[r]} item={table.items[r]} "
                        f"(n_users={n_users}, n_items={n_items})")
    dedup = table.deduplicated()
    u = dedup.users
    v = dedup.items + n_users
    n = n_users + n_items
    ones = np.ones(2 * len(u))
    adj = SparseSymmetricMatrix.from_coo(n, np.concatenate([u, v]), np.concatenate([v, u]), ones)
    degrees = np.diff(adj.indptr).astype(np.float64)
    return BipartiteGraph(n_users, n_items, adj, degrees)


def normalized_laplacian(g: BipartiteGraph, allow_isolated=False) -> SparseSymmetricMatrix:
    """L = I - D^{-1/2} A D^{-1/2}.

    Isolated nodes are rejected unless ``allow_isolated``; then their row is
    the identity row (the node is its own eigenvector, eigenvalue 1).
    """
    isolated = np.flatnonzero(g.degrees == 0)
    if len(isolated) and not allow_isolated:
        raise DataError(f"isolated nodes have no normalized Laplacian: {isolated[:20].tolist()}")
    if len(isolated):
        log.warning("%d isolated nodes kept with identity Laplacian rows", len(isolated))
    A = g.adjacency
    inv_sqrt = np.zeros_like(g.degrees)
    inv_sqrt[g.degrees > 0] = 1.0 / np.sqrt(g.degrees[g.degrees > 0])
    rows = A.row_ids()
    off = -A.values * inv_sqrt[rows] * inv_sqrt[A.indices]
    diag = np.arange(A.n)
    return SparseSymmetricMatrix.from_coo(
        A.n, np.concatenate([rows, diag]), np.concatenate([A.indices, diag]),
        np.concatenate([off, np.ones(A.n)]))


def propagate_features(g: BipartiteGraph, item_features) -> np.ndarray:
    """Item rows verbatim; each user row is the mean of its neighbouring items' rows."""
    F = np.asarray(item_features, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] != g.n_items:
        raise DataError(f"item feature matrix has shape {F.shape}, expected ({g.n_items}, d)")
    indptr, items = g.user_item_csr()
    sums = kernels.csr_matmat(indptr, items, np.ones(len(items)), F)
    deg = np.maximum(np.diff(indptr), 1).astype(np.float64)
    return np.vstack([sums / deg[:, None], F])


def _numeric(token: str) -> bool:
    try:
        int(token)
    except ValueError:
        return False
    return True


def _dense_ids(raw):
    uniq = sorted(set(raw), key=int) if all(_numeric(r) for r in raw) else sorted(set(raw))
    lookup = {r: i for i, r in enumerate(uniq)}
    return np.fromiter((lookup[r] for r in raw), dtype=np.int64, count=len(raw)), uniq


def read_interactions(path):
    """Parse a ``user<TAB>item<TAB>timestamp`` file.

    Returns ``(table, user_ids, item_ids)`` where the id lists map dense
    index -> raw id string. Raw ids are ordered numerically when every id is
    an integer, lexicographically otherwise.
    """
    users, items, stamps = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if lineno == 1 and not _numeric(parts[0].strip()) and len(parts) == 3 \
                    and not _numeric(parts[2].strip()):
                continue  # header row
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 tab-separated columns, got {len(parts)}")
            try:
                ts = int(parts[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: timestamp {parts[2]!r} is not an integer") from None
            users.append(parts[0].strip())
            items.append(parts[1].strip())
            stamps.append(ts)
    if not users:
        raise DataError(f"{path}: no interactions")
    u, user_ids = _dense_ids(users)
    i, item_ids = _dense_ids(items)
    return InteractionTable(u, i, np.asarray(stamps)), user_ids, item_ids


def write_interactions(path, table: InteractionTable, user_ids=None, item_ids=None):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("user_id\titem_id\ttimestamp\n")
        for u, i, t in zip(table.users, table.items, table.timestamps):
            uid = user_ids[u] if user_ids is not None else u
            iid = item_ids[i] if item_ids is not None else i
            fh.write(f"{uid}\t{iid}\t{t}\n")


def write_id_map(path, ids):
    Path(path).write_text("".join(f"{raw}\t{idx}\n" for idx, raw in enumerate(ids)), encoding="utf-8")
