"""Chronological splits, negative sampling, Adam and the training loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from . import model as mdl
from .autodiff import forward_record
from .config import TrainConfig
from .errors import DataError, NumericalError
from .evaluator import cold_start_filter, evaluate_ranking
from .graph import InteractionTable, build_graph
from .objective import BatchSample, LossBreakdown, breakdown_from_tape, loss_program, sample_scr

log = logging.getLogger(__name__)

NEG_CANDIDATES = 8


# --- splitting ---------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    """Row indices into the interaction table for each part."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def tables(self, table: InteractionTable):
        return table.subset(self.train), table.subset(self.val), table.subset(self.test)


def split_counts(n, ratios=(0.8, 0.1, 0.1)):
    """(train, val, test) sizes for a user with ``n`` interactions.

    val/test get ``round(n * ratio)`` rounded half up and at least one each;
    train takes the remainder. Users with fewer than 3 records keep their
    first record in train and the last one (if any) in test.
    """
    if n < 3:
        return (n, 0, 0) if n <= 1 else (1, 0, n - 1)
    n_val = max(1, int(np.floor(n * ratios[1] + 0.5)))
    n_test = max(1, int(np.floor(n * ratios[2] + 0.5)))
    while n - n_val - n_test < 1:
        if n_val >= n_test and n_val > 1:
            n_val -= 1
        else:
            n_test -= 1
    return n - n_val - n_test, n_val, n_test


def chronological_split(table: InteractionTable, ratios=(0.8, 0.1, 0.1)) -> SplitSpec:
    """Per-user time-ordered split; timestamp ties keep input order."""
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    if len(table) == 0:
        raise DataError("cannot split an empty interaction table")
    order = np.lexsort((np.arange(len(table)), table.timestamps, table.users))
    users = table.users[order]
    starts = np.flatnonzero(np.r_[True, users[1:] != users[:-1]])
    ends = np.r_[starts[1:], len(order)]
    part = np.empty(len(order), dtype=np.int8)
    short = 0
    for s, e in zip(starts, ends):
        n_tr, n_va, _ = split_counts(e - s, ratios)
        short += (e - s) < 3
        part[s:s + n_tr] = 0
        part[s + n_tr:s + n_tr + n_va] = 1
        part[s + n_tr + n_va:e] = 2
    if short:
        log.warning("%d users have fewer than 3 interactions; used the short-history split", short)
    return SplitSpec(*(np.sort(order[part == k]) for k in range(3)))


# --- negatives ---------------------------------------------------------------

def user_item_csr(table: InteractionTable, n_users):
    """Sorted, de-duplicated item lists per user as (indptr, indices)."""
    key = np.unique(table.users * (int(table.items.max(initial=0)) + 1) + table.items)
    width = int(table.items.max(initial=0)) + 1
    rows, cols = key // width, key % width
    indptr = np.zeros(n_users + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    return np.cumsum(indptr), cols.astype(np.int64)


def sample_negatives(users, indptr, indices, n_items, rng, n_candidates=NEG_CANDIDATES):
    """One uniform non-interacted item per entry of ``users``.

    Returns ``(items, ok)``; ``ok`` is False for users who have interacted
    with every item (their entry is -1).
    """
    users = np.asarray(users, dtype=np.int64)
    out = np.full(len(users), -1, dtype=np.int64)
    ok = (indptr[users + 1] - indptr[users]) < n_items
    if not ok.all():
        log.warning("skipping %d positives of users with no eligible negative item",
                    int((~ok).sum()))
    todo = np.flatnonzero(ok)
    while len(todo):
        cand = rng.integers(0, n_items, size=(len(todo), n_candidates))
        pick = kernels.first_free_candidate(users[todo], cand, indptr, indices)
        hit = pick >= 0
        out[todo[hit]] = pick[hit]
        todo = todo[~hit]
    return out, ok


# --- optimizer ----------------------------------------------------------------

@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict):
        """In-place update of ``params``."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --- epochs ---------------------------------------------------------------------

class RngStreams:
    """Independent generators for each stochastic part of training."""

    def __init__(self, seed):
        init, order, neg, mask, scr = np.random.SeedSequence(seed).spawn(5)
        self.init = np.random.default_rng(init)
        self.order = np.random.default_rng(order)
        self.neg = np.random.default_rng(neg)
        self.mask = np.random.default_rng(mask)
        self.scr = np.random.default_rng(scr)


@dataclass
class TrainState:
    params: dict
    opt: Adam
    rngs: RngStreams
    epoch: int = 0


def make_batches(train: InteractionTable, ctx, cfg: TrainConfig, rngs: RngStreams, indptr, indices):
    """Yield :class:`BatchSample` objects covering every train positive once."""
    perm = rngs.order.permutation(len(train))
    k = cfg.negatives_per_positive
    for s in range(0, len(perm), cfg.batch_size):
        idx = perm[s:s + cfg.batch_size]
        u, i = train.users[idx], train.items[idx]
        neg_u = np.repeat(u, k)
        neg_i, ok = sample_negatives(neg_u, indptr, indices, ctx.n_items, rngs.neg)
        neg_u, neg_i = neg_u[ok], neg_i[ok]
        users = np.concatenate([u, neg_u])
        items = np.concatenate([i, neg_i])
        labels = np.concatenate([np.ones(len(u)), np.zeros(len(neg_u))])
        masks = ()
        if cfg.sbm_weight > 0:
            masks = tuple(mdl.sample_mask(cfg.B, cfg.mask_rate, rngs.mask).gamma
                          for _ in range(cfg.sbm_samples))
        scr = None
        if cfg.uses_scr and len(np.unique(i)) >= 2:
            scr = sample_scr(i, ctx, cfg.scr_negatives, rngs.scr, max_items=cfg.scr_items)
        yield BatchSample(users, items, labels, masks, scr)


def train_epoch(state: TrainState, ctx, cfg: TrainConfig, train: InteractionTable,
                indptr, indices, program=None) -> LossBreakdown:
    """One pass over the train positives; returns the batch-averaged breakdown."""
    program = program or loss_program(ctx, cfg)
    rows = []
    for b, batch in enumerate(make_batches(train, ctx, cfg, state.rngs, indptr, indices)):
        out, tape = forward_record(program, state.params, batch)
        br = breakdown_from_tape(tape, cfg)
        if not np.isfinite(br.total):
            raise NumericalError(f"non-finite loss in epoch {state.epoch + 1}, batch {b}: {br.to_dict()}")
        grads = tape.backward(out)
        state.opt.step(state.params, grads)
        rows.append(br)
    state.epoch += 1
    mean = lambda name: float(np.mean([getattr(r, name) for r in rows]))  # noqa: E731
    return LossBreakdown(mean("bce"), mean("sbm"), mean("scr"), mean("total"),
                         cfg.sbm_weight, cfg.scr_weight, cfg.temperature)


def early_stop_check(history, patience=20):
    """``("continue", None)`` or ``("stop", best_epoch)``; epochs are 1-based.

    Ties keep the earlier epoch as best.
    """
    if not history:
        raise ValueError("early_stop_check needs a non-empty history")
    best = int(np.argmax(history))
    if len(history) - 1 - best >= patience:
        return "stop", best + 1
    return "continue", None


# --- orchestration --------------------------------------------------------------

@dataclass
class FitResult:
    params: dict
    ctx: object
    split: SplitSpec
    tables: tuple
    history: list
    best_epoch: int
    header: dict
    metrics: dict = field(default_factory=dict)


def graph_table(table, split: SplitSpec, cfg: TrainConfig):
    return table.subset(split.train) if cfg.train_only_graph else table


def build_context(table, n_users, n_items, item_features, cfg: TrainConfig, split=None):
    split = split or chronological_split(table)
    graph = build_graph(graph_table(table, split, cfg), n_users, n_items)
    return mdl.prepare_context(cfg, graph, item_features), split


def fit(table: InteractionTable, n_users, n_items, item_features: dict, cfg: TrainConfig,
        out_dir=None, header_extra=None, max_epochs=None, eval_ks=None) -> FitResult:
    """Train with validation Recall@20 early stopping and return the best parameters.

    With ``out_dir`` the run writes ``train_log.jsonl``, ``model.ckpt`` and
    ``metrics.json``; final metrics are computed from the reloaded
    checkpoint so they match a later ``evaluate`` call.
    """
    max_epochs = cfg.max_epochs if max_epochs is None else max_epochs
    ks = tuple(eval_ks or cfg.eval_k)
    ctx, split = build_context(table, n_users, n_items, item_features, cfg)
    train, val, test = split.tables(table)
    rngs = RngStreams(cfg.seed)
    params = mdl.init_params(cfg, n_users, n_items, ctx.feature_dims, rngs.init)
    mdl.fit_partitions(ctx, params)
    state = TrainState(params, Adam(cfg.lr), rngs)
    indptr, indices = user_item_csr(train, n_users)
    program = loss_program(ctx, cfg)

    out = Path(out_dir) if out_dir is not None else None
    logf = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logf = open(out / "train_log.jsonl", "w", encoding="utf-8")
    history, val_hist = [], []
    best = {k: v.copy() for k, v in params.items()}
    best_epoch = 0
    try:
        for _ in range(max_epochs):
            t0 = time.perf_counter()
            br = train_epoch(state, ctx, cfg, train, indptr, indices, program)
            Z = mdl.node_embedding(ctx, state.params)
            rec20 = evaluate_ranking(Z, n_users, train, val, ks=(20,)).recall[20]
            wall = (time.perf_counter() - t0) * 1000.0
            row = {"epoch": state.epoch, "bce": br.bce, "sbm": br.sbm, "scr": br.scr,
                   "total": br.total, "val_recall@20": rec20, "wall_ms": round(wall, 3)}
            history.append(row)
            val_hist.append(rec20)
            if logf is not None:
                logf.write(json.dumps(row) + "\n")
                logf.flush()
            log.info("epoch %d total=%.5f val R@20=%.4f", state.epoch, br.total, rec20)
            if rec20 > max(val_hist[:-1], default=-np.inf):
                best = {k: v.copy() for k, v in state.params.items()}
                best_epoch = state.epoch
            verdict, _ = early_stop_check(val_hist, cfg.patience)
            if verdict == "stop":
                break
    finally:
        if logf is not None:
            logf.close()

    header = dict(header_extra or {})
    header.update({
        "config": cfg.to_dict(), "config_digest": cfg.digest(),
        "n_users": int(n_users), "n_items": int(n_items), "best_epoch": best_epoch,
        "partitions": {c: p.to_json() for c, p in ctx.partitions.items()},
    })
    result = FitResult(best, ctx, split, (train, val, test), history, best_epoch, header)
    if out is not None:
        mdl.save_checkpoint(out / "model.ckpt", best, header)
        result.params, _ = mdl.load_checkpoint(out / "model.ckpt")
    result.metrics = final_metrics(ctx, result.params, result.tables, n_users, ks)
    if out is not None:
        (out / "metrics.json").write_text(json.dumps(result.metrics, indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")
    return result


def final_metrics(ctx, params, tables, n_users, ks=(10, 20)) -> dict:
    train, val, test = tables
    Z = mdl.node_embedding(ctx, params)
    cold = cold_start_filter(train, n_users)
    out = {}
    for name, target in (("val", val), ("test", test)):
        out[name] = evaluate_ranking(Z, n_users, train, target, ks).to_json()
        out[f"{name}_cold"] = evaluate_ranking(Z, n_users, train, target, ks, users=cold).to_json()
    return out


def id_only_config(cfg: TrainConfig) -> TrainConfig:
    """Ablation: ID embeddings only, spectral pipeline intact."""
    return cfg.replace(modalities=("id",), scr_weight=0.0)


def no_spectral_config(cfg: TrainConfig) -> TrainConfig:
    """Ablation: one band per modality, no masking or contrastive terms."""
    return cfg.replace(spectral=False, n_bands=1, sbm_weight=0.0, scr_weight=0.0)



def gradcheck_fixture(seed=0, sbm_weight=0.5, scr_weight=0.5):
    """A 30-node problem (20 users, 10 items) with M=2, r=2, d=8.

    Returns ``(program, params, batch, ctx)`` ready for
    :func:`ssrec.autodiff.grad_check`. The auxiliary weights are raised so
    their gradients are not swamped by the task loss.
    """
    from .data import SyntheticSpec, synth_generate

    data = synth_generate(SyntheticSpec(n_users=20, n_items=10, n_blocks=2, interactions_per_user=6,
                                        img_dim=6, txt_dim=5, seed=seed))
    cfg = TrainConfig(dim=8, n_bands=2, rank=2, gate_hidden=4, mask_rate=0.5, batch_size=64,
                      sbm_weight=sbm_weight, scr_weight=scr_weight, scr_negatives=4, seed=seed)
    ctx, split = build_context(data.table, 20, 10, {"img": data.img, "txt": data.txt}, cfg)
    train = data.table.subset(split.train)
    rngs = RngStreams(seed)
    params = mdl.init_params(cfg, 20, 10, ctx.feature_dims, rngs.init)
    mdl.fit_partitions(ctx, params)
    indptr, indices = user_item_csr(train, 20)
    batch = next(make_batches(train, ctx, cfg, rngs, indptr, indices))
    return loss_program(ctx, cfg), params, batch, ctx
