"""Two-phase training (baseline, then branched predictor) and checkpoint I/O."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import dumps, fmt_float
from .baseline import ClassStats, baseline_logits, class_statistics, pretrain_baseline
from .branching import (ClassifierHead, LossOptions, PredictorParams, init_predictor, loss_and_grad,
                        route_and_score)
from .clustering import GroupPartition, cluster_predicates
from .config import KTConfig, TrainConfig, batch_indices, lr_at
from .errors import FormatError, InvalidArgument
from .numerics import sgd_step, softmax
from .synthdata import Dataset, Split
from .transfer import Memory

__all__ = [
    "Checkpoint", "TrainConfig", "lr_at", "train_predictor", "save_checkpoint", "load_checkpoint",
    "pretrain_stage", "memory_geometry", "write_loss_log", "scores_for",
]

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "1"


@dataclass
class Checkpoint:
    config: dict
    partition: GroupPartition | None = None
    baseline: dict[str, np.ndarray] | None = None
    stats: ClassStats | None = None
    predictor: PredictorParams | None = None
    iteration: int = 0
    metrics: dict = field(default_factory=dict)
    version: str = CHECKPOINT_VERSION


def pretrain_stage(ds: Dataset, cfg: TrainConfig, loss_log: list | None = None) -> Checkpoint:
    """Baseline training, class statistics and predicate clustering."""
    params = pretrain_baseline(ds, cfg, loss_log)
    stats = class_statistics(ds, params)
    partition = cluster_predicates(stats, cfg.num_groups) if cfg.num_groups > 1 else GroupPartition.trivial(ds.spec.A)
    return Checkpoint(cfg.to_dict(), partition, params, stats, None, cfg.total_iters)


def _check_inputs(ds: Dataset, stats: ClassStats, partition: GroupPartition) -> None:
    A, P = ds.spec.A, ds.spec.P
    if partition.A != A:
        raise InvalidArgument(f"partition covers {partition.A} classes, dataset has A={A}")
    if stats.avg_e.shape != (A, P) or stats.avg_u.shape != (A, P) or stats.avg_prob.shape != (A, A):
        raise InvalidArgument("class statistics do not match the dataset dimensions")
    if not all(np.all(np.isfinite(x)) for x in (stats.avg_e, stats.avg_u, stats.avg_prob)):
        raise InvalidArgument("class statistics contain non-finite values")
    if len(ds.train) == 0:
        raise InvalidArgument("training split is empty")


def train_predictor(ds: Dataset, stats: ClassStats, partition: GroupPartition, cfg: TrainConfig,
                    loss_log: list | None = None, baseline: dict | None = None) -> Checkpoint:
    _check_inputs(ds, stats, partition)
    params = init_predictor(partition, stats, ds.spec.P, seed=cfg.seed, kt=cfg.kt, branch=cfg.branch,
                            knowledge_transfer=cfg.knowledge_transfer)
    opts = LossOptions.from_config(cfg)
    tr = ds.train
    flat = {k: v.copy() for k, v in params.flat().items()}
    velocity: dict = {}
    it = 0
    for it, idx in enumerate(batch_indices(len(tr), cfg, "predictor")):
        current = params.with_flat(flat)
        L, dec, grads = loss_and_grad(current, tr.e[idx], tr.u[idx], tr.z[idx], tr.g[idx], opts)
        lr = lr_at(it, cfg)
        flat, velocity = sgd_step(flat, grads, lr, cfg.momentum, velocity)
        if loss_log is not None:
            loss_log.append({"iter": it, **dec, "lr": lr})
    params = params.with_flat(flat)
    return Checkpoint(cfg.to_dict(), partition, baseline, stats, params, cfg.total_iters)


def memory_geometry(V: np.ndarray, x: np.ndarray, g: np.ndarray, min_support: int = 10) -> dict:
    """Per class: mean distance of its samples to its own memory row vs. to the other rows."""
    A = V.shape[0]
    dist = np.linalg.norm(x[:, None, :] - V[None, :, :], axis=-1)
    own, other, eligible = np.full(A, np.nan), np.full(A, np.nan), []
    for c in range(A):
        mask = g == c
        if mask.sum() < min_support:
            continue
        eligible.append(c)
        d = dist[mask]
        own[c] = d[:, c].mean()
        other[c] = np.delete(d, c, axis=1).mean()
    closer = [c for c in eligible if own[c] < other[c]]
    return {
        "own": own, "other": other, "eligible": eligible,
        "fraction_closer": len(closer) / len(eligible) if eligible else float("nan"),
    }


# --- serialization ---------------------------------------------------------

def _predictor_to_dict(p: PredictorParams) -> dict:
    heads = {name: {"targets": None if h.targets is None else list(h.targets), "n_out": h.n_out,
                    "mem_subset": None if h.mem_subset is None else list(h.mem_subset)}
             for name, h in p.heads.items()}
    return {
        "heads": heads,
        "knowledge_transfer": p.knowledge_transfer,
        "kt": {"alpha": p.kt.alpha, "gamma": p.kt.gamma, "margin": p.kt.margin, "lambda_mem": p.kt.lambda_mem},
        "arrays": p.flat(),
    }


def _array(block: dict, key: str, shape: tuple, where: str) -> np.ndarray:
    try:
        arr = np.array(block[key], dtype=np.float64)
    except KeyError:
        raise FormatError(f"{where}: missing array {key!r}") from None
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{where}.{key}: unreadable array ({exc})") from None
    if arr.shape != tuple(shape):
        raise FormatError(f"{where}.{key}: shape {arr.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{where}.{key}: non-finite values")
    return arr


def _predictor_from_dict(d: dict, partition: GroupPartition, A: int, P: int) -> PredictorParams:
    where = "params.predictor"
    try:
        arrays = d["arrays"]
        kt_on = bool(d["knowledge_transfer"])
        kt = KTConfig(**d["kt"])
        head_specs = d["heads"]
    except (KeyError, TypeError, InvalidArgument) as exc:
        raise FormatError(f"{where}: {exc}") from None
    heads = {}
    for name, hs in head_specs.items():
        n_out = int(hs["n_out"])
        sub = hs["mem_subset"]
        coef = A if sub is None else len(sub)
        blk = f"{where}.{name}"
        kw = {k: _array(arrays, f"{name}.{k}", shp, blk) for k, shp in
              (("W_e", (n_out, P)), ("W_u", (n_out, P)), ("W_z", (n_out, A)))}
        if kt_on:
            kw["C_e"] = _array(arrays, f"{name}.C_e", (coef, P), blk)
            kw["C_u"] = _array(arrays, f"{name}.C_u", (coef, P), blk)
        heads[name] = ClassifierHead(name, None if hs["targets"] is None else tuple(hs["targets"]), n_out,
                                     None if sub is None else tuple(sub), **kw)
    mem_e = mem_u = None
    if kt_on:
        mem_e = Memory(_array(arrays, "memory_e.V", (A, P), where))
        mem_u = Memory(_array(arrays, "memory_u.V", (A, P), where))
    return PredictorParams(heads, partition, kt, kt_on, mem_e, mem_u)


def checkpoint_to_text(ckpt: Checkpoint) -> str:
    params = {
        "baseline": ckpt.baseline,
        "stats": None if ckpt.stats is None else ckpt.stats.to_dict(),
        "predictor": None if ckpt.predictor is None else _predictor_to_dict(ckpt.predictor),
    }
    doc = {
        "version": ckpt.version,
        "config": ckpt.config,
        "partition": None if ckpt.partition is None else ckpt.partition.to_dict(),
        "params": params,
        "iteration": ckpt.iteration,
        "metrics": ckpt.metrics,
    }
    return dumps(doc) + "\n"


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_text(checkpoint_to_text(ckpt), encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {doc.get('version') if isinstance(doc, dict) else None!r}")
    params = doc.get("params")
    if not isinstance(params, dict):
        raise FormatError(f"{path}: missing params block")
    partition = GroupPartition.from_dict(doc["partition"]) if doc.get("partition") else None

    stats = None
    if params.get("stats") is not None:
        s = params["stats"]
        try:
            A = len(s["avg_prob"])
            P = len(s["avg_e"][0]) if A else 0
        except (KeyError, TypeError, IndexError) as exc:
            raise FormatError(f"{path}: params.stats: {exc}") from None
        stats = ClassStats(_array(s, "avg_prob", (A, A), "params.stats"), _array(s, "avg_e", (A, P), "params.stats"),
                           _array(s, "avg_u", (A, P), "params.stats"),
                           np.array(s.get("support", np.zeros(A)), dtype=np.int64), list(s.get("warnings", [])))
    baseline = None
    if params.get("baseline") is not None:
        b = params["baseline"]
        try:
            A, P = np.array(b["W_e"]).shape
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}: params.baseline: {exc}") from None
        baseline = {k: _array(b, k, (A, P), "params.baseline") for k in ("W_e", "W_u")}
    predictor = None
    if params.get("predictor") is not None:
        if partition is None:
            raise FormatError(f"{path}: predictor block without a partition")
        try:
            W_z = np.array(next(v for k, v in params["predictor"]["arrays"].items() if k.endswith(".W_z")))
            A, P = W_z.shape[1], np.array(next(v for k, v in params["predictor"]["arrays"].items()
                                               if k.endswith(".W_e"))).shape[1]
        except (KeyError, StopIteration, ValueError, IndexError) as exc:
            raise FormatError(f"{path}: params.predictor: {exc}") from None
        predictor = _predictor_from_dict(params["predictor"], partition, A, P)
    return Checkpoint(doc.get("config", {}), partition, baseline, stats, predictor,
                      int(doc.get("iteration", 0)), doc.get("metrics", {}), doc["version"])


def write_loss_log(rows: list[dict], path) -> None:
    """CSV with iter, L, relation loss per head, memory loss per stream and lr."""
    keys: list[str] = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    head = ["iter", "L"] + sorted(k for k in keys if k.startswith("L_rel")) + \
        sorted(k for k in keys if k.startswith("L_mem")) + ["lr"]
    head = [k for k in head if k in keys]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(head)
        for r in rows:
            w.writerow([fmt_float(r[k]) if isinstance(r.get(k), float) else r.get(k, "") for k in head])


def scores_for(ckpt: Checkpoint, split: Split, routing: str = "hard") -> np.ndarray:
    """Ranking scores over all classes for every row of ``split``."""
    if ckpt.predictor is not None:
        return route_and_score(ckpt.predictor, split.e, split.u, split.z, routing)[0]
    if ckpt.baseline is not None:
        return softmax(baseline_logits(split.e, split.u, split.z, ckpt.baseline))
    raise InvalidArgument("checkpoint holds neither predictor nor baseline parameters")
