"""Feature-matrix files and the synthetic planted-block data generator."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .graph import InteractionTable, write_interactions

FEATURE_MAGIC = b"SSRF"
_HEADER = struct.Struct("<4sII")


def save_features(path, X):
    X = np.asarray(X)
    if X.ndim != 2:
        raise DataError(f"feature matrix must be 2-D, got shape {X.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, X.shape[0], X.shape[1]))
        fh.write(np.ascontiguousarray(X, dtype="<f4").tobytes())


def load_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, rows, cols = _HEADER.unpack_from(raw, 0)
    if magic != FEATURE_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r} at byte 0 (expected {FEATURE_MAGIC!r})")
    need = 4 * rows * cols
    have = len(raw) - _HEADER.size
    if have != need:
        raise DataError(f"{path}: payload is {have} bytes, header declares {need} "
                        f"(mismatch at byte {_HEADER.size + min(have, need)})")
    X = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, cols)
    bad = np.flatnonzero(~np.isfinite(X.ravel()))
    if len(bad):
        raise DataError(f"{path}: non-finite value at byte {_HEADER.size + 4 * int(bad[0])}")
    return X.astype(np.float64)


def load_features_csv(path) -> np.ndarray:
    try:
        X = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if not np.all(np.isfinite(X)):
        raise DataError(f"{path}: non-finite values")
    return X


def align_features(X, item_ids) -> np.ndarray:
    """Rows for the dense item order ``item_ids``.

    A matrix with one row per distinct item is taken as already aligned;
    a taller one is indexed by integer raw id.
    """
    if X.shape[0] == len(item_ids):
        return X
    try:
        rows = np.array([int(i) for i in item_ids])
    except ValueError:
        raise DataError(f"feature file has {X.shape[0]} rows for {len(item_ids)} items "
                        "and item ids are not integers") from None
    if rows.min() < 0 or rows.max() >= X.shape[0]:
        raise DataError(f"item id {rows.max()} has no row in a {X.shape[0]}-row feature file")
    return X[rows]


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 400
    n_items: int = 200
    n_blocks: int = 4
    interactions_per_user: int = 10
    modality_noise: float = 0.5
    cold_fraction: float = 0.2
    seed: int = 42
    img_dim: int = 48
    txt_dim: int = 32
    in_block: float = 0.9
    cold_interactions: int = 5

    def validate(self):
        if self.n_blocks <= 0 or self.n_users % self.n_blocks or self.n_items % self.n_blocks:
            raise DataError("n_blocks must divide both n_users and n_items")
        if self.modality_noise < 0 or not 0 <= self.cold_fraction < 1:
            raise DataError("need modality_noise >= 0 and cold_fraction in [0, 1)")
        if self.interactions_per_user <= self.cold_interactions:
            raise DataError("interactions_per_user must exceed the cold-start count")
        block = self.n_items // self.n_blocks
        n_in = round(self.in_block * self.interactions_per_user)
        n_out = self.interactions_per_user - n_in
        if n_in > block or n_out > self.n_items - block:
            raise DataError(f"{self.interactions_per_user} interactions per user do not fit "
                            f"blocks of {block} items without replacement")


@dataclass
class SyntheticData:
    table: InteractionTable
    img: np.ndarray
    txt: np.ndarray
    user_blocks: np.ndarray
    item_blocks: np.ndarray
    cold_users: np.ndarray


def synth_generate(spec: SyntheticSpec) -> SyntheticData:
    """Users and items in equal blocks; users mostly pick items of their own block.

    Modality features are the block centroid plus Gaussian noise. A
    ``cold_fraction`` of users keeps only ``cold_interactions`` records.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    ub = np.arange(spec.n_users) * spec.n_blocks // spec.n_users
    ib = np.arange(spec.n_items) * spec.n_blocks // spec.n_items
    n_cold = int(round(spec.cold_fraction * spec.n_users))
    cold = np.sort(rng.permutation(spec.n_users)[:n_cold])
    is_cold = np.zeros(spec.n_users, dtype=bool)
    is_cold[cold] = True

    users, items, stamps = [], [], []
    for u in range(spec.n_users):
        n = spec.interactions_per_user
        n_in = round(spec.in_block * n)
        own = np.flatnonzero(ib == ub[u])
        other = np.flatnonzero(ib != ub[u])
        picks = np.concatenate([rng.choice(own, n_in, replace=False),
                                rng.choice(other, n - n_in, replace=False)])
        picks = rng.permutation(picks)
        if is_cold[u]:
            picks = picks[: spec.cold_interactions]
        t = rng.integers(0, 1_000_000) + np.cumsum(rng.integers(1, 86_400, size=len(picks)))
        users.append(np.full(len(picks), u))
        items.append(picks)
        stamps.append(t)
    table = InteractionTable(np.concatenate(users), np.concatenate(items), np.concatenate(stamps))

    def modality(dim):
        centroids = rng.standard_normal((spec.n_blocks, dim))
        return centroids[ib] + spec.modality_noise * rng.standard_normal((spec.n_items, dim))

    img = modality(spec.img_dim)
    txt = modality(spec.txt_dim)
    return SyntheticData(table, img, txt, ub, ib, cold)


def write_synthetic(data: SyntheticData, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_interactions(out / "interactions.tsv", data.table)
    save_features(out / "img.f32bin", data.img)
    save_features(out / "txt.f32bin", data.txt)
    with open(out / "blocks.tsv", "w", encoding="utf-8") as fh:
        fh.write("kind\tid\tblock\n")
        for u, b in enumerate(data.user_blocks):
            fh.write(f"user\t{u}\t{b}\n")
        for i, b in enumerate(data.item_blocks):
            fh.write(f"item\t{i}\t{b}\n")
    return out
