"""Training configuration and its flat key/value file format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import DataError

LR_GRID = (0.0001, 0.0005, 0.001, 0.005)
MODALITIES = ("id", "img", "txt")


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 64
    n_bands: int = 4
    rank: int = 8
    mask_rate: float = 0.2
    sbm_weight: float = 0.01
    scr_weight: float = 0.01
    temperature: float = 0.2
    lr: float = 0.001
    batch_size: int = 2048
    negatives_per_positive: int = 1
    max_epochs: int = 1000
    patience: int = 20
    seed: int = 42
    dense_limit: int = 4096
    k_trunc: int = 256
    # model structure
    modalities: tuple = MODALITIES
    spectral: bool = True
    gate_hidden: int = 32
    graph_gate: str = "degree"
    shared_partition: bool = False
    leaky_slope: float = 0.01
    # auxiliary-loss sampling
    scr_negatives: int = 8
    scr_items: int = 256
    sbm_samples: int = 1
    # data handling
    train_only_graph: bool = True
    eval_k: tuple = (10, 20)
    lanczos_tol: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        object.__setattr__(self, "eval_k", tuple(int(k) for k in self.eval_k))
        problems = []
        for name in ("dim", "rank", "batch_size", "negatives_per_positive", "max_epochs", "patience",
                     "dense_limit", "k_trunc", "gate_hidden", "scr_negatives", "scr_items", "sbm_samples"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be positive")
        if self.n_bands < 1 or (self.spectral and self.n_bands < 2):
            problems.append("n_bands must be >= 2 (or 1 with spectral = false)")
        if not 0.0 <= self.mask_rate < 1.0:
            problems.append("mask_rate must lie in [0, 1)")
        if self.sbm_weight < 0 or self.scr_weight < 0:
            problems.append("loss weights must be non-negative")
        if self.temperature <= 0 or self.lr < 0:
            problems.append("temperature must be positive and lr non-negative")
        if "id" not in self.modalities or any(c not in MODALITIES for c in self.modalities):
            problems.append(f"modalities must include 'id' and be drawn from {MODALITIES}")
        if self.graph_gate not in ("degree", "constant"):
            problems.append("graph_gate must be 'degree' or 'constant'")
        if problems:
            raise DataError("invalid config: " + "; ".join(problems))

    @property
    def B(self):
        return self.n_bands * len(self.modalities)

    @property
    def uses_scr(self):
        return self.scr_weight > 0 and "img" in self.modalities and "txt" in self.modalities

    def replace(self, **kw) -> TrainConfig:
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        return {f.name: list(v) if isinstance(v := getattr(self, f.name), tuple) else v
                for f in fields(self)}

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: dict) -> TrainConfig:
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(raw) - set(known))
        if unknown:
            raise DataError(f"unknown config keys: {unknown}")
        return cls(**raw)


def load_config(path) -> TrainConfig:
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise DataError(f"{path}: {exc}") from None
    return TrainConfig.from_dict(raw)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if isinstance(value, bool):
            lines.append(f"{key} = {'true' if value else 'false'}")
        elif isinstance(value, str):
            lines.append(f'{key} = "{value}"')
        elif isinstance(value, list):
            lines.append(f"{key} = {json.dumps(value)}")
        else:
            lines.append(f"{key} = {value!r}")
    return "\n".join(lines) + "\n"
