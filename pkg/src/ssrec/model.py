"""Spectral band model: decompose, mask, cross-band operator, gate, fuse, score.

All forward math is written once against :class:`~ssrec.autodiff.Tape`;
the plain numpy entry points run the same code on a non-recording tape.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import spectral
from .autodiff import Tape, Var
from .config import TrainConfig
from .errors import DataError
from .graph import BipartiteGraph, normalized_laplacian, propagate_features
from .spectral import BandPartition, BandStack, Spectrum

log = logging.getLogger(__name__)

PARAM_ORDER = ("user_emb", "item_emb", "proj_img", "proj_txt", "gate_w1", "gate_b1", "gate_w2",
               "gate_b2", "cp_wq", "cp_wk", "cp_v", "out_w", "ggate_a", "ggate_b")
MASK_RETRIES = 8


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: TrainConfig, n_users, n_items, feature_dims: dict):
    d, B, h, r = cfg.dim, cfg.B, cfg.gate_hidden, cfg.rank
    shapes = {"user_emb": (n_users, d), "item_emb": (n_items, d)}
    for c in ("img", "txt"):
        if c in cfg.modalities:
            shapes[f"proj_{c}"] = (feature_dims[c], d)
    shapes.update({
        "gate_w1": (d + B, h), "gate_b1": (h,), "gate_w2": (h, B), "gate_b2": (B,),
        "cp_wq": (B, r), "cp_wk": (B, r), "cp_v": (r, d, d), "out_w": (d, d),
        "ggate_a": (B,), "ggate_b": (B,),
    })
    return {k: shapes[k] for k in PARAM_ORDER if k in shapes}


def init_params(cfg: TrainConfig, n_users, n_items, feature_dims: dict, rng) -> dict:
    """Fresh parameters; ordered as ``PARAM_ORDER``."""
    shapes = param_shapes(cfg, n_users, n_items, feature_dims)
    bound = 1.0 / np.sqrt(cfg.dim)

    def xavier(shape):
        fan_in, fan_out = shape[-2], shape[-1]
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-lim, lim, size=shape)

    params = {}
    for name, shape in shapes.items():
        if name in ("user_emb", "item_emb", "proj_img", "proj_txt"):
            params[name] = rng.uniform(-bound, bound, size=shape)
        elif name in ("gate_w1", "gate_w2", "out_w", "cp_v"):
            params[name] = xavier(shape)
        elif name in ("cp_wq", "cp_wk"):
            params[name] = rng.standard_normal(shape) / np.sqrt(cfg.rank)
        else:
            params[name] = np.zeros(shape)
    return params


@dataclass
class HyperKernel:
    """Rank-r CP factorization of the B x B family of d x d band-pair kernels."""

    wq: np.ndarray
    wk: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        if self.wq.ndim != 2 or self.wq.shape[1] <= 0:
            raise DataError(f"CP rank must be positive, got factor shape {self.wq.shape}")
        if self.wq.shape != self.wk.shape or self.v.shape[0] != self.wq.shape[1]:
            raise DataError("inconsistent CP factor shapes")

    @classmethod
    def from_params(cls, params):
        return cls(params["cp_wq"], params["cp_wk"], params["cp_v"])

    @property
    def rank(self):
        return self.wq.shape[1]

    def materialize(self, m, n):
        return np.einsum("i,i,ief->ef", self.wq[m], self.wk[n], self.v)


@dataclass(frozen=True)
class MaskSample:
    gamma: np.ndarray
    rate: float


def sample_mask(B, rate, rng, retries=MASK_RETRIES) -> MaskSample:
    """Keep each band with probability ``1 - rate``; never returns an all-zero mask."""
    if not 0.0 <= rate < 1.0:
        raise DataError(f"mask rate must be in [0, 1), got {rate}")
    for _ in range(retries + 1):
        gamma = (rng.random(B) >= rate).astype(np.float64)
        if gamma.any():
            return MaskSample(gamma, rate)
    gamma = np.zeros(B)
    gamma[rng.integers(B)] = 1.0
    return MaskSample(gamma, rate)


def spectral_band_mask(stack: BandStack, rate, rng):
    sample = sample_mask(stack.B, rate, rng)
    masked = BandStack(stack.data * sample.gamma[None, :, None], list(stack.band_axis_map))
    return masked, sample


# ---------------------------------------------------------------------------
# precomputed graph / spectral context


@dataclass
class SpectralContext:
    """Everything the forward pass needs that does not depend on parameters."""

    cfg: TrainConfig
    graph: BipartiteGraph
    spectrum: Spectrum | None
    features: dict                      # modality -> N x d_c propagated raw signal
    partitions: dict = field(default_factory=dict)
    raw_bands: dict = field(default_factory=dict)   # modality -> M x N x d_c
    id_band_cols: list = field(default_factory=list)
    band_stats: np.ndarray | None = None
    degree_feature: np.ndarray | None = None

    @property
    def n_users(self):
        return self.graph.n_users

    @property
    def n_items(self):
        return self.graph.n_items

    @property
    def n_nodes(self):
        return self.graph.n_nodes

    @property
    def band_axis_map(self):
        return [(c, m) for c in self.cfg.modalities for m in range(1, self.cfg.n_bands + 1)]

    def band_index(self, modality, band):
        return self.cfg.modalities.index(modality) * self.cfg.n_bands + (band - 1)

    @property
    def feature_dims(self):
        return {c: F.shape[1] for c, F in self.features.items()}


def prepare_context(cfg: TrainConfig, graph: BipartiteGraph, item_features: dict,
                    spectrum: Spectrum | None = None) -> SpectralContext:
    """Propagate item features to users and eigendecompose the Laplacian.

    Partitions are left empty; :func:`fit_partitions` or
    :func:`restore_partitions` completes the context.
    """
    feats = {}
    for c in ("img", "txt"):
        if c in cfg.modalities:
            if c not in item_features:
                raise DataError(f"modality {c!r} enabled but no {c} features given")
            feats[c] = propagate_features(graph, item_features[c])
    if cfg.spectral and spectrum is None:
        L = normalized_laplacian(graph, allow_isolated=True)
        if graph.n_nodes <= cfg.dense_limit:
            spectrum = spectral.eigendecompose(L, "full", dense_limit=cfg.dense_limit)
        else:
            spectrum = spectral.eigendecompose(L, "truncated", k=min(cfg.k_trunc, graph.n_nodes - 1),
                                               tol=cfg.lanczos_tol, seed=cfg.seed)
    deg = np.log1p(graph.degrees)
    sd = deg.std()
    dtilde = (deg - deg.mean()) / sd if sd > 0 else np.zeros_like(deg)
    return SpectralContext(cfg, graph, spectrum if cfg.spectral else None, feats,
                           degree_feature=dtilde)


def fit_partitions(ctx: SpectralContext, params: dict):
    """Energy partitions from the signals as they stand under ``params``."""
    if not ctx.cfg.spectral:
        return _finish_context(ctx, {})
    signals = project_modalities(ctx, params)
    _, parts = spectral.build_band_stack(signals, ctx.spectrum, ctx.cfg.n_bands,
                                         shared=ctx.cfg.shared_partition)
    return _finish_context(ctx, parts)


def restore_partitions(ctx: SpectralContext, parts_json: dict):
    parts = {c: BandPartition.from_json(p) for c, p in parts_json.items()}
    return _finish_context(ctx, parts)


def _finish_context(ctx: SpectralContext, parts: dict) -> SpectralContext:
    cfg = ctx.cfg
    M = cfg.n_bands
    ctx.partitions = parts
    N = ctx.n_nodes
    fractions = []
    if cfg.spectral:
        U = ctx.spectrum.eigenvectors
        idp = parts["id"]
        ctx.id_band_cols = [idp.modes(m) for m in range(1, M + 1)]
        # per-node energy of the unit impulse at that node, band by band
        lev = np.stack([np.sum(U[:, cols] ** 2, axis=1) for cols in ctx.id_band_cols], axis=1)
        if ctx.spectrum.truncated:
            lev[:, -1] += np.clip(1.0 - np.sum(U ** 2, axis=1), 0.0, None)
        fractions.append(lev)
        for c, F in ctx.features.items():
            comps = spectral.band_components(ctx.spectrum, F, parts[c])
            ctx.raw_bands[c] = comps
            fractions.append(np.einsum("mnc,mnc->nm", comps, comps))
    else:
        ctx.id_band_cols = []
        for c, F in ctx.features.items():
            ctx.raw_bands[c] = F[None]
        fractions = [np.ones((N, 1)) for _ in cfg.modalities]
    stats = []
    for f in fractions:
        tot = f.sum(axis=1, keepdims=True)
        stats.append(np.where(tot > 0, f / np.where(tot > 0, tot, 1.0), 1.0 / f.shape[1]))
    ctx.band_stats = np.concatenate(stats, axis=1) / len(cfg.modalities)
    return ctx


# ---------------------------------------------------------------------------
# forward pass on a tape


def _id_signal(tape: Tape, p):
    return tape.concat([p["user_emb"], p["item_emb"]], axis=0)


def tape_band_stack(tape: Tape, p, ctx: SpectralContext) -> Var:
    """N x B x d stack, modality-major along the band axis."""
    cfg = ctx.cfg
    E = _id_signal(tape, p)
    blocks = []
    if cfg.spectral:
        U = ctx.spectrum.eigenvectors
        Ehat = tape.matmul(U.T, E)
        bands = [tape.matmul(U[:, cols], tape.gather(Ehat, cols)) for cols in ctx.id_band_cols]
        if ctx.spectrum.truncated:
            bands[-1] = tape.add(bands[-1], tape.sub(E, tape.matmul(U, Ehat)))
        blocks.append(tape.concat(bands, axis=1, new_axis=True))
    else:
        blocks.append(tape.concat([E], axis=1, new_axis=True))
    for c in cfg.modalities[1:]:
        blocks.append(tape.contract("mnc,cd->nmd", ctx.raw_bands[c], p[f"proj_{c}"]))
    return tape.concat(blocks, axis=1) if len(blocks) > 1 else blocks[0]


def tape_hsno(tape: Tape, X, wq, wk, v) -> Var:
    """Z^{(m)} = sum_n K_mn x^{(n)} evaluated through the CP factors."""
    q = tape.contract("nbd,br->nrd", X, wk)
    y = tape.contract("nrd,red->nre", q, v)
    return tape.contract("nre,mr->nme", y, wq)


def tape_graph_gate(tape: Tape, Z, p, ctx: SpectralContext) -> Var:
    proj = tape.leaky_relu(tape.contract("nbd,ed->nbe", Z, p["out_w"]), ctx.cfg.leaky_slope)
    if ctx.cfg.graph_gate == "degree":
        logit = tape.add(tape.contract("n,b->nb", ctx.degree_feature, p["ggate_a"]), p["ggate_b"])
    else:
        logit = tape.add(np.zeros((ctx.n_nodes, ctx.cfg.B)), p["ggate_b"])
    return tape.contract("nbd,nb->nbd", proj, tape.sigmoid(logit))


def tape_fusion_weights(tape: Tape, p, ctx: SpectralContext) -> Var:
    inp = tape.concat([_id_signal(tape, p), ctx.band_stats], axis=1)
    hidden = tape.leaky_relu(tape.add(tape.matmul(inp, p["gate_w1"]), p["gate_b1"]), ctx.cfg.leaky_slope)
    logits = tape.add(tape.matmul(hidden, p["gate_w2"]), p["gate_b2"])
    return tape.softmax(logits, axis=1)


def tape_embed(tape: Tape, p, ctx: SpectralContext, stack: Var, gamma=None):
    """Node embeddings (N x d) and fusion weights (N x B) from a band stack."""
    x = stack if gamma is None else tape.mul(stack, np.asarray(gamma)[None, :, None])
    Z = tape_hsno(tape, x, p["cp_wq"], p["cp_wk"], p["cp_v"])
    H = tape_graph_gate(tape, Z, p, ctx)
    alpha = tape_fusion_weights(tape, p, ctx)
    return tape.contract("nbd,nb->nd", H, alpha), alpha


def tape_pair_logits(tape: Tape, z, users, items, n_users) -> Var:
    zu = tape.gather(z, users)
    zv = tape.gather(z, np.asarray(items) + n_users)
    return tape.contract("pd,pd->p", zu, zv)


# ---------------------------------------------------------------------------
# plain numpy entry points


def _run(fn, params, *args, **kw):
    tape = Tape(record=False)
    p = {k: tape.param(k, v) for k, v in params.items()}
    return fn(tape, p, *args, **kw)


def project_modalities(ctx: SpectralContext, params, raw: dict | None = None) -> dict:
    """Per-modality N x d signals: stacked ID embeddings and projected features."""
    raw = ctx.features if raw is None else raw
    out = {"id": np.vstack([params["user_emb"], params["item_emb"]])}
    for c in ctx.cfg.modalities[1:]:
        F = np.asarray(raw[c], dtype=np.float64)
        P = params[f"proj_{c}"]
        if F.ndim != 2 or F.shape[1] != P.shape[0]:
            raise DataError(f"{c} features have {F.shape[-1]} columns, projection expects {P.shape[0]}")
        out[c] = F @ P
    return out


def band_stack(ctx: SpectralContext, params) -> BandStack:
    data = _run(lambda t, p: tape_band_stack(t, p, ctx).value, params)
    return BandStack(data, ctx.band_axis_map)


def hsno_apply(X, kernel: HyperKernel) -> np.ndarray:
    X = X.data if isinstance(X, BandStack) else np.asarray(X, dtype=np.float64)
    if X.shape[1] != kernel.wq.shape[0]:
        raise DataError(f"kernel covers {kernel.wq.shape[0]} bands, stack has {X.shape[1]}")
    t = Tape(record=False)
    return tape_hsno(t, X, kernel.wq, kernel.wk, kernel.v).value


def graph_gate(Z, ctx: SpectralContext, params) -> np.ndarray:
    return _run(lambda t, p: tape_graph_gate(t, Z, p, ctx).value, params)


def fusion_weights(ctx: SpectralContext, params) -> np.ndarray:
    return _run(lambda t, p: tape_fusion_weights(t, p, ctx).value, params)


def fuse_bands(H, alpha) -> np.ndarray:
    return np.einsum("nbd,nb->nd", H, alpha)


def node_embedding(ctx: SpectralContext, params, mask: MaskSample | None = None) -> np.ndarray:
    def fn(t, p):
        stack = tape_band_stack(t, p, ctx)
        return tape_embed(t, p, ctx, stack, None if mask is None else mask.gamma)[0].value
    return _run(fn, params)


def embed_with_weights(ctx: SpectralContext, params):
    def fn(t, p):
        stack = tape_band_stack(t, p, ctx)
        z, alpha = tape_embed(t, p, ctx, stack)
        return z.value, alpha.value, stack.value
    return _run(fn, params)


def score_pairs(Z, pairs, n_users) -> np.ndarray:
    """sigmoid(z_u . z_v) per (user, item) pair; items are 0-based item indices."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    n_items = Z.shape[0] - n_users
    bad = np.flatnonzero((pairs[:, 0] < 0) | (pairs[:, 0] >= n_users)
                         | (pairs[:, 1] < 0) | (pairs[:, 1] >= n_items))
    if len(bad):
        raise DataError(f"pair {int(bad[0])} out of range: {pairs[bad[0]].tolist()}")
    s = np.einsum("pd,pd->p", Z[pairs[:, 0]], Z[pairs[:, 1] + n_users])
    return 0.5 * (1.0 + np.tanh(0.5 * s))


# ---------------------------------------------------------------------------
# checkpoint container

CKPT_MAGIC = b"SSRCKPT\x00"
CKPT_VERSION = 1


def save_checkpoint(path, params: dict, header: dict):
    tensors = [{"name": k, "shape": list(v.shape)} for k, v in params.items()]
    head = dict(header, version=CKPT_VERSION, tensors=tensors)
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for k in params:
            fh.write(np.ascontiguousarray(params[k], dtype="<f4").tobytes())


def load_checkpoint(path):
    """Return ``(params, header)``; tensors come back as float64."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 8 + struct.calcsize("<IQ")
    if off + hlen > len(raw):
        raise DataError(f"{path}: truncated header ({len(raw) - off} of {hlen} bytes)")
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    params = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"]))
        if off + 4 * n > len(raw):
            raise DataError(f"{path}: truncated tensor {t['name']} at byte {off}")
        params[t["name"]] = np.frombuffer(raw, dtype="<f4", count=n, offset=off) \
            .astype(np.float64).reshape(t["shape"])
        off += 4 * n
    return params, header
