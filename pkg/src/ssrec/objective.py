"""Task loss, band-masking consistency, band-wise contrastive alignment, and their sum."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import model as mdl
from .autodiff import Tape
from .errors import DataError

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossBreakdown:
    bce: float
    sbm: float
    scr: float
    total: float
    sbm_weight: float
    scr_weight: float
    temperature: float

    def to_dict(self):
        return asdict(self)


# --- numpy reference forms ------------------------------------------------

def bce_loss(scores, labels) -> float:
    y = np.asarray(labels, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be 0 or 1")
    p = np.clip(np.asarray(scores, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


def sbm_consistency_loss(full_scores, masked_scores) -> float:
    a = np.asarray(full_scores, dtype=np.float64)
    b = np.asarray(masked_scores, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"score vectors differ in length: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def _cos(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return 0.0 if na == 0 or nb == 0 else float(a @ b / (na * nb))


def info_nce(pos_sim, neg_sims, temperature) -> float:
    """-log(exp(pos/t) / (exp(pos/t) + sum exp(neg/t)))."""
    logits = np.concatenate([[pos_sim], np.asarray(neg_sims, dtype=np.float64)]) / temperature
    mx = logits.max()
    return float(mx + np.log(np.exp(logits - mx).sum()) - logits[0])


@dataclass(frozen=True)
class SCRSample:
    anchor_nodes: np.ndarray     # P
    anchor_bands: np.ndarray     # P
    cand_nodes: np.ndarray       # P x (1 + n_neg); column 0 is the positive
    cand_bands: np.ndarray


def sample_scr(items, ctx, n_negatives, rng, max_items=None) -> SCRSample:
    """Anchors are image bands of each item; positives the text band of the same item/band.

    Half the negatives are other items at the same band, half are any item at
    another band; each negative's modality is image or text with equal odds.
    """
    items = np.unique(np.asarray(items, dtype=np.int64))
    if len(items) < 2:
        raise DataError("contrastive batch needs at least 2 distinct items")
    if max_items is not None and len(items) > max_items:
        items = np.sort(rng.choice(items, max_items, replace=False))
    M = ctx.cfg.n_bands
    v = np.repeat(items, M)
    m = np.tile(np.arange(1, M + 1), len(items))
    P = len(v)
    n_same = n_negatives if M == 1 else (n_negatives + 1) // 2
    n_other = n_negatives - n_same
    # other item: shift by a nonzero offset within the item list
    pos_in = np.searchsorted(items, v)
    shift = rng.integers(1, len(items), size=(P, n_same))
    neg_same_items = items[(pos_in[:, None] + shift) % len(items)]
    neg_same_bands = np.repeat(m[:, None], n_same, axis=1)
    neg_other_items = items[rng.integers(0, len(items), size=(P, n_other))]
    if n_other:
        off = rng.integers(1, M, size=(P, n_other))
        neg_other_bands = (m[:, None] - 1 + off) % M + 1
    else:
        neg_other_bands = np.zeros((P, 0), dtype=np.int64)
    neg_items = np.concatenate([neg_same_items, neg_other_items], axis=1)
    neg_bands = np.concatenate([neg_same_bands, neg_other_bands], axis=1)
    neg_mod = rng.integers(0, 2, size=neg_items.shape)
    img = ctx.band_index("img", 1)
    txt = ctx.band_index("txt", 1)
    base = np.where(neg_mod == 0, img, txt)
    n_users = ctx.n_users
    anchor_bands = img + m - 1
    cand_nodes = np.concatenate([v[:, None], neg_items], axis=1) + n_users
    cand_bands = np.concatenate([(txt + m - 1)[:, None], base + neg_bands - 1], axis=1)
    return SCRSample(v + n_users, anchor_bands, cand_nodes, cand_bands)


# --- tape forms ----------------------------------------------------------

def tape_bce(tape: Tape, logits, labels):
    """Mean BCE of sigmoid(logits), evaluated as softplus for stability."""
    y = np.asarray(labels, dtype=np.float64)
    signed = tape.mul(logits, 1.0 - 2.0 * y)   # +s for y=0, -s for y=1
    pair = tape.concat([np.zeros(len(y)), signed], axis=1, new_axis=True)
    return tape.mean(tape.logsumexp(pair, axis=1))


def tape_sbm(tape: Tape, full_logits, masked_logits):
    diff = tape.sub(tape.sigmoid(full_logits), tape.sigmoid(masked_logits))
    return tape.mul(tape.sqnorm(diff), 1.0 / full_logits.value.size)


def tape_scr(tape: Tape, stack, sample: SCRSample, temperature):
    if temperature <= 0:
        raise DataError(f"temperature must be positive, got {temperature}")
    anchors = tape.normalize(tape.gather(stack, (sample.anchor_nodes, sample.anchor_bands)))
    cands = tape.normalize(tape.gather(stack, (sample.cand_nodes, sample.cand_bands)))
    logits = tape.mul(tape.contract("pd,pkd->pk", anchors, cands), 1.0 / temperature)
    first = np.zeros(sample.cand_nodes.shape[1])
    first[0] = 1.0
    per = tape.sub(tape.logsumexp(logits, axis=1), tape.contract("pk,k->p", logits, first))
    return tape.mean(per)


def scr_loss(stack, item_batch, negatives_per_positive, temperature, ctx, rng) -> float:
    """Contrastive loss on a band stack (numpy array or BandStack) for a batch of items."""
    if temperature <= 0:
        raise DataError(f"temperature must be positive, got {temperature}")
    data = getattr(stack, "data", stack)
    sample = sample_scr(item_batch, ctx, negatives_per_positive, rng)
    return float(tape_scr(Tape(record=False), data, sample, temperature).value)


def total_loss(bce, sbm, scr, sbm_weight, scr_weight, temperature=0.2) -> LossBreakdown:
    if sbm_weight < 0 or scr_weight < 0:
        raise DataError("loss weights must be non-negative")
    return LossBreakdown(float(bce), float(sbm), float(scr),
                         float(bce) + sbm_weight * float(sbm) + scr_weight * float(scr),
                         sbm_weight, scr_weight, temperature)


# --- the full training objective -----------------------------------------

@dataclass(frozen=True)
class BatchSample:
    users: np.ndarray
    items: np.ndarray
    labels: np.ndarray
    masks: tuple = ()              # one gamma per consistency sample
    scr: SCRSample | None = None


def loss_program(ctx, cfg=None):
    """Build ``program(tape, params, batch) -> total`` for the composite objective.

    The returned program stores the breakdown terms on the tape as
    ``tape.terms`` for logging.
    """
    cfg = cfg or ctx.cfg

    def program(tape: Tape, p, batch: BatchSample):
        stack = mdl.tape_band_stack(tape, p, ctx)
        z, _ = mdl.tape_embed(tape, p, ctx, stack)
        logits = mdl.tape_pair_logits(tape, z, batch.users, batch.items, ctx.n_users)
        bce = tape_bce(tape, logits, batch.labels)
        total = bce
        sbm = scr = None
        if cfg.sbm_weight > 0 and batch.masks:
            parts = []
            for gamma in batch.masks:
                zm, _ = mdl.tape_embed(tape, p, ctx, stack, gamma)
                mlog = mdl.tape_pair_logits(tape, zm, batch.users, batch.items, ctx.n_users)
                parts.append(tape_sbm(tape, logits, mlog))
            sbm = parts[0]
            for extra in parts[1:]:
                sbm = tape.add(sbm, extra)
            if len(parts) > 1:
                sbm = tape.mul(sbm, 1.0 / len(parts))
            total = tape.add(total, tape.mul(sbm, cfg.sbm_weight))
        if cfg.uses_scr and batch.scr is not None:
            scr = tape_scr(tape, stack, batch.scr, cfg.temperature)
            total = tape.add(total, tape.mul(scr, cfg.scr_weight))
        tape.terms = {"bce": bce, "sbm": sbm, "scr": scr}
        return total

    return program


def breakdown_from_tape(tape, cfg) -> LossBreakdown:
    t = tape.terms
    val = lambda v: 0.0 if v is None else float(v.value)  # noqa: E731
    return total_loss(val(t["bce"]), val(t["sbm"]), val(t["scr"]),
                      cfg.sbm_weight, cfg.scr_weight, cfg.temperature)
