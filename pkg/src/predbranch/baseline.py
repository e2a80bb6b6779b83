"""All-class relation predictor softmax(W_e e + W_u u + z) and class statistics."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ._io import rng_for
from .config import TrainConfig, batch_indices, lr_at
from .errors import InvalidArgument
from .numerics import cross_entropy, sgd_step, softmax, softmax_ce_grad
from .synthdata import Dataset, Split

log = logging.getLogger(__name__)


@dataclass
class ClassStats:
    avg_prob: np.ndarray  # (A, A)
    avg_e: np.ndarray  # (A, P)
    avg_u: np.ndarray  # (A, P)
    support: np.ndarray  # (A,)
    warnings: list[str]

    def to_dict(self) -> dict:
        return {"avg_prob": self.avg_prob, "avg_e": self.avg_e, "avg_u": self.avg_u,
                "support": self.support, "warnings": self.warnings}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassStats":
        return cls(np.asarray(d["avg_prob"], dtype=np.float64), np.asarray(d["avg_e"], dtype=np.float64),
                   np.asarray(d["avg_u"], dtype=np.float64), np.asarray(d["support"], dtype=np.int64),
                   list(d.get("warnings", [])))


def init_baseline(A: int, P: int, seed: int) -> dict[str, np.ndarray]:
    bound = 1.0 / np.sqrt(P)
    rng = rng_for(seed, "baseline", "init")
    return {"W_e": rng.uniform(-bound, bound, (A, P)), "W_u": rng.uniform(-bound, bound, (A, P))}


def baseline_logits(e, u, z, params) -> np.ndarray:
    W_e, W_u = params["W_e"], params["W_u"]
    e, u, z = (np.asarray(x, dtype=np.float64) for x in (e, u, z))
    if e.shape[-1] != W_e.shape[1] or u.shape[-1] != W_u.shape[1] or z.shape[-1] != W_e.shape[0]:
        raise InvalidArgument(
            f"dimension mismatch: e {e.shape}, u {u.shape}, z {z.shape} vs W_e {W_e.shape}, W_u {W_u.shape}"
        )
    return e @ W_e.T + u @ W_u.T + z


def baseline_forward(s, params) -> np.ndarray:
    """Probability vector over all A classes for one sample (or a Split batch)."""
    return softmax(baseline_logits(s.e, s.u, s.z, params))


def baseline_loss_and_grad(e, u, z, g, params) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy over a batch and its gradient wrt W_e, W_u."""
    logits = baseline_logits(e, u, z, params)
    n = logits.shape[0]
    loss = float(np.mean(cross_entropy(logits, g)))
    d = softmax_ce_grad(logits, g) / n
    return loss, {"W_e": d.T @ e, "W_u": d.T @ u}


def mean_loss(split: Split, params) -> float:
    return float(np.mean(cross_entropy(baseline_logits(split.e, split.u, split.z, params), split.g)))


def pretrain_baseline(ds: Dataset, cfg: TrainConfig, loss_log: list | None = None) -> dict[str, np.ndarray]:
    tr = ds.train
    if len(tr) == 0:
        raise InvalidArgument("training split is empty")
    params = init_baseline(ds.spec.A, ds.spec.P, cfg.seed)
    velocity: dict = {}
    for it, idx in enumerate(batch_indices(len(tr), cfg, "baseline")):
        loss, grads = baseline_loss_and_grad(tr.e[idx], tr.u[idx], tr.z[idx], tr.g[idx], params)
        lr = lr_at(it, cfg)
        params, velocity = sgd_step(params, grads, lr, cfg.momentum, velocity)
        if loss_log is not None:
            loss_log.append({"iter": it, "L": loss, "lr": lr})
    return params


def class_statistics(ds: Dataset, params) -> ClassStats:
    tr = ds.train
    A, P = ds.spec.A, ds.spec.P
    probs = softmax(baseline_logits(tr.e, tr.u, tr.z, params)) if len(tr) else np.zeros((0, A))
    support = np.bincount(tr.g, minlength=A).astype(np.int64)
    avg_prob = np.full((A, A), 1.0 / A)
    avg_e = np.zeros((A, P))
    avg_u = np.zeros((A, P))
    warnings = []
    for c in range(A):
        mask = tr.g == c
        if support[c] == 0:
            msg = f"class {c} has no training samples; using uniform probability row and zero feature means"
            log.warning(msg)
            warnings.append(msg)
            continue
        avg_prob[c] = probs[mask].mean(axis=0)
        avg_e[c] = tr.e[mask].mean(axis=0)
        avg_u[c] = tr.u[mask].mean(axis=0)
    return ClassStats(avg_prob, avg_e, avg_u, support, warnings)
