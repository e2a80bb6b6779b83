"""Run configuration records and the learning-rate schedule."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterator

import numpy as np

from ._io import rng_for
from .errors import InvalidArgument

ROUTING_MODES = ("hard", "soft")


@dataclass(frozen=True)
class KTConfig:
    alpha: float = 10.0
    gamma: float = 0.01
    margin: float = 80.0
    lambda_mem: float = 1.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidArgument("alpha must be > 0")
        if self.gamma < 0 or self.margin < 0 or self.lambda_mem < 0:
            raise InvalidArgument("gamma, margin and lambda_mem must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    base_lr: float = 0.01
    warmup_iters: int = 500
    total_iters: int = 3000
    momentum: float = 0.0
    seed: int = 0
    kt: KTConfig = field(default_factory=KTConfig)
    # model structure (the ablation grid toggles these)
    branch: bool = True
    knowledge_transfer: bool = True
    num_groups: int = 2
    routing: str = "hard"
    # gradient routing and loss options
    memory_grad_from_rel: bool = False
    off_branch_ce: bool = False
    coef_ce_u: bool = False
    mem_loss_per_classifier: bool = False
    lr_decay: float = 0.0
    # published per-task batch sizes, echoed for provenance only
    reference_batch_size: dict = field(default_factory=lambda: {"PredCls": 12, "SGCls": 4, "SGDet": 4})

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        if not self.base_lr > 0:
            raise InvalidArgument("base_lr must be > 0")
        if self.warmup_iters < 0 or self.total_iters < 0:
            raise InvalidArgument("warmup_iters and total_iters must be >= 0")
        if self.routing not in ROUTING_MODES:
            raise InvalidArgument(f"routing must be one of {ROUTING_MODES}")
        if self.num_groups < 1:
            raise InvalidArgument("num_groups must be >= 1")
        if self.lr_decay < 0:
            raise InvalidArgument("lr_decay must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidArgument(f"unknown config fields: {sorted(unknown)}")
        if isinstance(d.get("kt"), dict):
            d["kt"] = KTConfig(**d["kt"])
        return cls(**d)

    def with_overrides(self, **kw) -> "TrainConfig":
        kt_keys = {f.name for f in fields(KTConfig)}
        kt_kw = {k: kw.pop(k) for k in list(kw) if k in kt_keys}
        cfg = replace(self, **kw)
        if kt_kw:
            cfg = replace(cfg, kt=replace(cfg.kt, **kt_kw))
        return cfg


def lr_at(it: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to base_lr, then constant (optionally 1/(1+decay*t))."""
    if it < 0:
        raise InvalidArgument("iteration must be >= 0")
    if it < cfg.warmup_iters:
        return cfg.base_lr * it / cfg.warmup_iters
    if cfg.lr_decay:
        return cfg.base_lr / (1.0 + cfg.lr_decay * (it - cfg.warmup_iters))
    return cfg.base_lr


def batch_indices(n: int, cfg: TrainConfig, label: str) -> Iterator[np.ndarray]:
    """Seeded mini-batch index arrays, reshuffled every epoch, total_iters of them."""
    if n == 0:
        raise InvalidArgument("cannot draw batches from an empty training set")
    it, epoch = 0, 0
    while it < cfg.total_iters:
        perm = rng_for(cfg.seed, label, "epoch", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            if it >= cfg.total_iters:
                return
            yield perm[start:start + cfg.batch_size]
            it += 1
        epoch += 1
