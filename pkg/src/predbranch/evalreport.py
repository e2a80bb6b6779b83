"""Recall@K, mean recall@K and frequency-group reporting."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgument

DEFAULT_KS = (20, 50, 100)
GROUP_NAMES = ("top", "middle", "bottom")


def _scene_slices(scene_id: np.ndarray):
    """Yield index arrays, one per scene, in order of first appearance."""
    order = np.argsort(scene_id, kind="stable")
    sid = scene_id[order]
    bounds = np.flatnonzero(np.diff(sid)) + 1
    return np.split(order, bounds)


def gt_ranks(scores: np.ndarray, g: np.ndarray, scene_id: np.ndarray) -> np.ndarray:
    """0-based rank of each ground-truth (candidate, label) pair within its scene.

    Pairs are ordered by score descending, then lower label index, then lower
    candidate position within the scene.
    """
    scores = np.asarray(scores, dtype=np.float64)
    g = np.asarray(g, dtype=np.int64)
    scene_id = np.asarray(scene_id)
    ranks = np.empty(g.shape[0], dtype=np.int64)
    A = scores.shape[1]
    labels = np.arange(A)
    for idx in _scene_slices(scene_id):
        S = scores[idx][None, :, :]  # (1, n, A): every pair in the scene
        lab = g[idx][:, None, None]  # (n, 1, 1): one row per ground truth
        s = scores[idx, g[idx]][:, None, None]
        pos = np.arange(len(idx))
        earlier = pos[None, :, None] < pos[:, None, None]
        ahead = (S > s) | ((S == s) & ((labels[None, None, :] < lab) | ((labels[None, None, :] == lab) & earlier)))
        ranks[idx] = ahead.sum(axis=(1, 2))
    return ranks


def recall_at_k(scores, g, scene_id, K: int, A: int | None = None) -> np.ndarray:
    """Per-class recall@K; classes with no ground truth get NaN."""
    if K < 1:
        raise InvalidArgument(f"K must be >= 1, got {K}")
    scores = np.asarray(scores, dtype=np.float64)
    g = np.asarray(g, dtype=np.int64)
    A = A or scores.shape[1]
    hit = gt_ranks(scores, g, scene_id) < K
    return _per_class(hit, g, A)


def _per_class(hit: np.ndarray, g: np.ndarray, A: int) -> np.ndarray:
    total = np.bincount(g, minlength=A).astype(np.float64)
    recalled = np.bincount(g, weights=hit.astype(np.float64), minlength=A)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, recalled / np.where(total > 0, total, 1.0), np.nan)


def mean_recall(per_class: np.ndarray) -> float:
    vals = per_class[~np.isnan(per_class)]
    return float(vals.mean()) if vals.size else float("nan")


def frequency_groups(frequencies) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split classes by frequency rank into top 20% / middle / bottom 30%.

    A = 50 gives the 10/25/15 split. Rank ties go to the lower class index.
    """
    freq = np.asarray(frequencies)
    A = freq.size
    order = np.array(sorted(range(A), key=lambda c: (-freq[c], c)), dtype=np.int64)
    n_top = A // 5
    n_bottom = (3 * A) // 10
    return order[:n_top], order[n_top:A - n_bottom], order[A - n_bottom:]


def group_report(per_class: np.ndarray, frequencies) -> dict[str, float]:
    out = {}
    for name, members in zip(GROUP_NAMES, frequency_groups(frequencies)):
        vals = per_class[members]
        vals = vals[~np.isnan(vals)]
        out[name] = float(vals.mean()) if vals.size else float("nan")
    return out


@dataclass
class EvalReport:
    ks: tuple[int, ...]
    per_class: dict[int, np.ndarray]
    mR: dict[int, float]
    groups: dict[int, dict[str, float]]
    support: np.ndarray
    config: dict = field(default_factory=dict)

    def rows(self, config_name: str, seed: int) -> list[list]:
        out = []
        for K in self.ks:
            gr = self.groups[K]
            out.append([config_name, seed, K, self.mR[K], gr["top"], gr["middle"], gr["bottom"],
                        *self.per_class[K].tolist()])
        return out


def evaluate_scores(scores, g, scene_id, train_frequencies, ks=DEFAULT_KS, config: dict | None = None) -> EvalReport:
    scores = np.asarray(scores, dtype=np.float64)
    g = np.asarray(g, dtype=np.int64)
    A = scores.shape[1]
    ranks = gt_ranks(scores, g, scene_id)
    per_class, mR, groups = {}, {}, {}
    for K in ks:
        if K < 1:
            raise InvalidArgument(f"K must be >= 1, got {K}")
        pc = _per_class(ranks < K, g, A)
        per_class[K] = pc
        mR[K] = mean_recall(pc)
        groups[K] = group_report(pc, train_frequencies)
    return EvalReport(tuple(ks), per_class, mR, groups, np.bincount(g, minlength=A), dict(config or {}))


def csv_header(A: int) -> list[str]:
    return ["config_name", "seed", "K", "mR", "top_mean", "middle_mean", "bottom_mean"] + [
        f"recall_{c}" for c in range(A)
    ]


def _cell(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else format(v, ".17g")
    return v


def write_report_csv(path, rows: list[list], A: int) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(A))
        for r in rows:
            w.writerow([_cell(v) for v in r])


def read_report_csv(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


ABLATION_CONFIGS = (
    # name, branch, knowledge_transfer; None marks the pretrained baseline
    ("baseline", None, None),
    ("branch", True, False),
    ("kt", False, True),
    ("branch+kt", True, True),
)


def ablation_seed(ds, base_cfg, seed: int, ks=(100,), routing: str | None = None) -> list[tuple[str, EvalReport]]:
    """All four ablation configurations for one seed, sharing one pretrain stage."""
    from dataclasses import replace

    from .trainer import pretrain_stage, scores_for, train_predictor

    cfg = replace(base_cfg, seed=int(seed))
    routing = routing or cfg.routing
    pre = pretrain_stage(ds, cfg)
    freq = ds.class_counts["train"]
    test = ds.test
    out = []
    for name, branch, kt in ABLATION_CONFIGS:
        if branch is None:
            ckpt = pre
        else:
            ckpt = train_predictor(ds, pre.stats, pre.partition, replace(cfg, branch=branch, knowledge_transfer=kt),
                                   baseline=pre.baseline)
        rep = evaluate_scores(scores_for(ckpt, test, routing), test.g, test.scene_id, freq, ks,
                              {"name": name, **replace(cfg, branch=bool(branch), knowledge_transfer=bool(kt)).to_dict()})
        out.append((name, rep))
    return out


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PREDBRANCH_THREADS", "1")))
    except ValueError:
        raise InvalidArgument("PREDBRANCH_THREADS must be an integer") from None


def ablation_run(ds, base_cfg, seeds, ks=(100,), out_dir=None) -> list[list]:
    """Ablation grid over ``seeds``; rows ordered by seed, then configuration.

    With ``out_dir`` each (config, seed) run gets its own CSV and the merged
    table goes to ``ablation.csv``. Seeds run in separate processes when
    PREDBRANCH_THREADS > 1; the reduction order does not depend on that.
    """
    seeds = [int(s) for s in seeds]
    workers = min(_threads(), len(seeds))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            per_seed = list(pool.map(ablation_seed, [ds] * len(seeds), [base_cfg] * len(seeds), seeds,
                                     [tuple(ks)] * len(seeds)))
    else:
        per_seed = [ablation_seed(ds, base_cfg, s, tuple(ks)) for s in seeds]
    A = ds.spec.A
    rows = []
    for seed, reports in zip(seeds, per_seed):
        for name, rep in reports:
            r = rep.rows(name, seed)
            rows.extend(r)
            if out_dir is not None:
                write_report_csv(Path(out_dir) / f"{name}_seed{seed}.csv", r, A)
    if out_dir is not None:
        write_report_csv(Path(out_dir) / "ablation.csv", rows, A)
    return rows
