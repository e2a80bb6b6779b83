"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the terminal summary (see conftest) and also
immediately, so ``pytest -s`` shows them as they complete.
"""
import math
import time

import numpy as np
import pytest

from predbranch.baseline import ClassStats, class_statistics, pretrain_baseline
from predbranch.branching import branch_forward, init_predictor, relation_loss, route_and_score
from predbranch.clustering import GroupPartition, adjusted_rand_index, cluster_predicates
from predbranch.config import KTConfig, TrainConfig
from predbranch.evalreport import ablation_run, evaluate_scores, mean_recall, recall_at_k, write_report_csv
from predbranch.gradsuite import run_suite
from predbranch.synthdata import DatasetSpec, RelationSample, exponent_for_ratio, generate_dataset
from predbranch.trainer import memory_geometry, pretrain_stage, save_checkpoint, scores_for, train_predictor
from predbranch.transfer import memory_loss

from conftest import ACCEPTANCE
from oracles import brute_force_mean_recall, head_probs


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def acceptance_dataset(seed: int = 0, n_test: int = 4000):
    A = 20
    return generate_dataset(DatasetSpec(A=A, P=16, n_train=20000, n_test=n_test, noise_scale=0.5,
                                        imbalance_exponent=exponent_for_ratio(A, 50.0), seed=seed))


def test_criterion_1_gradient_suite():
    results, elapsed = run_suite(range(20))
    worst = max(r.max_rel_error for r in results)
    record(1, worst <= 1e-4 and elapsed < 30.0,
           f"max relative error {worst:.2e} over {len(results)} checks (<= 1e-4), {elapsed:.1f}s (< 30s)")


def test_criterion_2_forward_oracle():
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        A = int(rng.integers(4, 9))
        P = int(rng.integers(2, 7))
        n_first = int(rng.integers(1, A))
        perm = rng.permutation(A)
        part = GroupPartition((tuple(perm[:n_first]), tuple(perm[n_first:])))
        stats = ClassStats(np.full((A, A), 1 / A), rng.normal(size=(A, P)), rng.normal(size=(A, P)),
                           np.ones(A, dtype=np.int64), [])
        alpha = float(rng.uniform(0.5, 10.0))
        params = init_predictor(part, stats, P, seed=seed, kt=KTConfig(alpha=alpha))
        s = RelationSample(rng.normal(size=P), rng.normal(size=P), rng.normal(size=A), 0, 0)
        for head in params.heads.values():
            got = branch_forward(s, head, (params.memory_e, params.memory_u), params.kt).p[0]
            want = head_probs(s.e, s.u, s.z, head, params.memory_e.V, params.memory_u.V, alpha)
            worst = max(worst, float(np.max(np.abs(got - want))))
    record(2, worst <= 1e-12, f"max |branch_forward - oracle| = {worst:.2e} on 100 instances (<= 1e-12)")


def test_criterion_3_metric_oracle():
    mismatches = 0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        A = int(rng.integers(1, 7))
        sizes = rng.integers(1, 5, size=int(rng.integers(1, 4)))
        scene = np.repeat(np.arange(sizes.size), sizes)
        n = scene.size
        scores = rng.choice([0.0, 0.1, 0.5, 0.9], size=(n, A))  # coarse values force ties
        g = rng.integers(0, A, n)
        K = int(rng.integers(1, n * A + 2))
        if mean_recall(recall_at_k(scores, g, scene, K, A)) != brute_force_mean_recall(scores, g, scene, K, A):
            mismatches += 1
    record(3, mismatches == 0, f"{mismatches} mismatches vs brute-force enumeration on 200 instances (exact)")


def test_criterion_4_closed_form_losses():
    V = np.array([[0.0, 0.0], [100.0, 0.0]])
    mem = memory_loss(np.zeros(2), V, 0, KTConfig(gamma=0.01, margin=80.0))
    A, P = 7, 3
    part = GroupPartition(((0, 1, 2, 3, 4), (5, 6)))
    rng = np.random.default_rng(0)
    stats = ClassStats(np.full((A, A), 1 / A), rng.normal(size=(A, P)), rng.normal(size=(A, P)),
                       np.ones(A, dtype=np.int64), [])
    params = init_predictor(part, stats, P, seed=0)
    params = params.with_flat({k: v if k.startswith("memory") else np.zeros_like(v) for k, v in params.flat().items()})
    head = params.heads["b0"]
    s = RelationSample(rng.normal(size=P), rng.normal(size=P), rng.normal(size=A), 3, 0)
    rel = relation_loss(branch_forward(s, head, (params.memory_e, params.memory_u), params.kt), head, 3, part)
    ok = abs(mem - 0.3) <= 1e-12 and abs(rel - 5 * math.log(5)) <= 1e-9
    record(4, ok, f"memory_loss {mem!r} (0.3 +- 1e-12); zero-weight relation_loss {rel:.12f} (5 ln 5 +- 1e-9)")


def test_criterion_5_cluster_recovery():
    t0 = time.perf_counter()
    recovered = 0
    for seed in range(10):
        ds = generate_dataset(DatasetSpec(A=20, P=16, n_train=4000, n_test=0, n_latent_clusters=2,
                                          cluster_separation=4.0, imbalance_exponent=exponent_for_ratio(20, 50.0),
                                          seed=seed))
        stats = class_statistics(ds, pretrain_baseline(ds, TrainConfig(seed=seed)))
        part = cluster_predicates(stats, 2)
        recovered += adjusted_rand_index(part.group_of, ds.latent_cluster) == 1.0
    elapsed = time.perf_counter() - t0
    record(5, recovered >= 9 and elapsed < 10.0,
           f"ARI 1.0 in {recovered}/10 seeds (>= 9), {elapsed:.1f}s including baseline pretraining (< 10s)")


def test_criterion_6_ablation_trend(tmp_path):
    t0 = time.perf_counter()
    ds = acceptance_dataset(0)
    rows = ablation_run(ds, TrainConfig(), range(5), ks=(100,), out_dir=tmp_path)
    elapsed = time.perf_counter() - t0
    by = {(r[0], r[1]): r for r in rows}
    bottom_wins = sum(by[("branch+kt", s)][6] > by[("baseline", s)][6] for s in range(5))
    mr_wins = sum(by[("branch+kt", s)][3] >= by[("baseline", s)][3] for s in range(5))
    detail = (f"bottom recall@100 BRANCH+KT > baseline in {bottom_wins}/5, mR@100 >= in {mr_wins}/5 "
              f"(both >= 4); {elapsed:.0f}s (< 300s); mean mR@100 baseline "
              f"{np.mean([by[('baseline', s)][3] for s in range(5)]):.3f} vs BRANCH+KT "
              f"{np.mean([by[('branch+kt', s)][3] for s in range(5)]):.3f}")
    record(6, bottom_wins >= 4 and mr_wins >= 4 and elapsed < 300.0, detail)


def test_criterion_7_memory_geometry():
    ds = acceptance_dataset(0, n_test=0)
    cfg = TrainConfig(seed=0)
    pre = pretrain_stage(ds, cfg)
    ck = train_predictor(ds, pre.stats, pre.partition, cfg)
    tr = ds.train
    ge = memory_geometry(ck.predictor.memory_e.V, tr.e, tr.g, min_support=10)
    gu = memory_geometry(ck.predictor.memory_u.V, tr.u, tr.g, min_support=10)
    ok = ge["fraction_closer"] >= 0.8 and gu["fraction_closer"] >= 0.8
    record(7, ok, f"own row closer for {ge['fraction_closer']:.2f} (e) / {gu['fraction_closer']:.2f} (u) "
                  f"of {len(ge['eligible'])} classes with support >= 10 (>= 0.8)")


def _pipeline(ds, out_dir):
    cfg = TrainConfig(total_iters=150, warmup_iters=20, batch_size=16, seed=5)
    pre = pretrain_stage(ds, cfg)
    ck = train_predictor(ds, pre.stats, pre.partition, cfg, baseline=pre.baseline)
    save_checkpoint(ck, out_dir / "ck.json")
    rep = evaluate_scores(scores_for(ck, ds.test), ds.test.g, ds.test.scene_id, ds.class_counts["train"], (5, 20))
    write_report_csv(out_dir / "report.csv", rep.rows("run", 5), ds.spec.A)


def test_criterion_8_determinism(tmp_path):
    spec = DatasetSpec(A=8, P=6, n_train=600, n_test=200, scene_size=16, seed=2)
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir()
    b.mkdir()
    _pipeline(generate_dataset(spec), a)
    _pipeline(generate_dataset(spec), b)
    same = all((a / f).read_bytes() == (b / f).read_bytes() for f in ("ck.json", "report.csv"))
    record(8, same, "checkpoint and report byte-identical across two runs" if same else "outputs differ")


def test_criterion_9_routing_invariants():
    hard_bad, soft_worst, n = 0, 0.0, 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        A, P = int(rng.integers(3, 9)), int(rng.integers(2, 6))
        n_first = int(rng.integers(1, A))
        perm = rng.permutation(A)
        part = GroupPartition((tuple(perm[:n_first]), tuple(perm[n_first:])))
        stats = ClassStats(np.full((A, A), 1 / A), rng.normal(size=(A, P)), rng.normal(size=(A, P)),
                           np.ones(A, dtype=np.int64), [])
        params = init_predictor(part, stats, P, seed=seed, kt=KTConfig(alpha=float(rng.uniform(1, 10))))
        e, u, z = rng.normal(size=(100, P)) * 2, rng.normal(size=(100, P)) * 2, rng.normal(size=(100, A)) * 2
        hard, chosen = route_and_score(params, e, u, z, "hard")
        hard_bad += int(np.sum(part.group_of[hard.argmax(1)] != chosen))
        soft, _ = route_and_score(params, e, u, z, "soft")
        soft_worst = max(soft_worst, float(np.max(np.abs(soft.sum(1) - 1.0))))
        n += 100
    record(9, hard_bad == 0 and soft_worst <= 1e-9,
           f"{n} instances: hard top-1 outside chosen branch {hard_bad} times; "
           f"max |sum(soft) - 1| = {soft_worst:.1e} (<= 1e-9)")
