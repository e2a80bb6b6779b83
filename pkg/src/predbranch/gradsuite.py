"""Finite-difference verification of every analytic gradient in the package."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ._io import rng_for
from .baseline import ClassStats, baseline_loss_and_grad
from .branching import LossOptions, head_loss_and_grad, init_predictor, loss_and_grad
from .clustering import GroupPartition
from .config import KTConfig
from .numerics import TOL, cross_entropy, grad_check, softmax_ce_grad
from .transfer import kt_backward, kt_forward, memory_loss_and_grad


@dataclass
class GradResult:
    name: str
    seed: int
    max_rel_error: float


def _instance(seed: int, P: int = 8, A: int = 6, n_first: int = 3, B: int = 4):
    rng = rng_for(seed, "gradsuite")
    perm = rng.permutation(A)
    partition = GroupPartition((tuple(perm[:n_first]), tuple(perm[n_first:])))
    stats = ClassStats(np.full((A, A), 1.0 / A), rng.normal(size=(A, P)), rng.normal(size=(A, P)),
                       np.ones(A, dtype=np.int64), [])
    # small alpha keeps logits moderate; this margin leaves the hinge active for about two thirds of samples
    kt = KTConfig(alpha=1.5, gamma=0.5, margin=3.5, lambda_mem=0.7)
    e, u = rng.normal(size=(B, P)), rng.normal(size=(B, P))
    z = rng.normal(size=(B, A))
    g = rng.integers(0, A, B)
    return rng, partition, stats, kt, e, u, z, g


def check_linear_softmax_ce(seed: int, P: int = 8, A: int = 6) -> float:
    rng = rng_for(seed, "linear-ce")
    x = rng.normal(size=(5, P))
    t = rng.integers(0, A, 5)

    def f(p):
        logits = x @ p["W"].T
        return float(np.mean(cross_entropy(logits, t))), {"W": softmax_ce_grad(logits, t).T @ x / 5}

    return grad_check(f, {"W": rng.normal(size=(A, P))}, TOL.grad_step)


def check_baseline(seed: int) -> float:
    rng, _, _, _, e, u, z, g = _instance(seed)
    A, P = z.shape[1], e.shape[1]
    params = {"W_e": rng.normal(size=(A, P)) * 0.5, "W_u": rng.normal(size=(A, P)) * 0.5}
    return grad_check(lambda p: baseline_loss_and_grad(e, u, z, g, p), params, TOL.grad_step)


def check_transfer_chain(seed: int) -> float:
    """Coefficient -> knowledge -> gate -> scaled feature, wrt x, projector and memory rows."""
    rng, _, stats, kt, e, _, _, g = _instance(seed)
    c = 3
    probe = rng.normal(size=e.shape)
    target = rng.integers(0, c, e.shape[0])

    def f(p):
        cache = kt_forward(p["x"], p["W"], p["V"], kt.alpha)
        loss = float((probe * cache.out).sum() + np.sum(cross_entropy(cache.q, target)))
        dx, dW, dV = kt_backward(cache, probe, softmax_ce_grad(cache.q, target))
        return loss, {"x": dx, "W": dW, "V": dV}

    params = {"x": e.copy(), "W": rng.normal(size=(c, e.shape[1])), "V": stats.avg_e[:c].copy()}
    return grad_check(f, params, TOL.grad_step)


def check_memory_loss(seed: int) -> float:
    _, _, stats, kt, e, _, _, g = _instance(seed)

    def f(p):
        losses, dx, dV = memory_loss_and_grad(p["x"], p["V"], g, kt)
        return float(losses.sum()), {"x": dx, "V": dV}

    return grad_check(f, {"x": e.copy(), "V": stats.avg_e.copy()}, TOL.grad_step)


def check_relation_loss(seed: int) -> float:
    """Per-head relation loss wrt the head's own weights (memory rows get no gradient from it)."""
    _, partition, stats, kt, e, u, z, g = _instance(seed)
    params = init_predictor(partition, stats, e.shape[1], seed=seed, kt=kt)
    opts = LossOptions(lambda_mem=kt.lambda_mem)
    worst = 0.0
    for name in params.heads:
        if name == "root":
            gg = g
        else:
            # branch heads only see samples from their own group
            gg = np.array([params.heads[name].targets[i % params.heads[name].n_out] for i in range(len(g))])

        def f(flat, name=name, gg=gg):
            return head_loss_and_grad(params.with_flat(flat), name, e, u, z, gg, opts)

        def lo(flat, name=name, gg=gg):
            return head_loss_and_grad(params.with_flat(flat), name, e, u, z, gg, opts, with_grad=False)[0]

        names = [k for k in params.flat() if k.startswith(name + ".")]
        worst = max(worst, grad_check(f, params.flat(), TOL.grad_step, names=names, loss_only=lo))
    return worst


def check_total_loss(seed: int, memory_grad_from_rel: bool = True) -> float:
    _, partition, stats, kt, e, u, z, g = _instance(seed)
    params = init_predictor(partition, stats, e.shape[1], seed=seed, kt=kt)
    opts = LossOptions(lambda_mem=kt.lambda_mem, memory_grad_from_rel=memory_grad_from_rel)
    flat = params.flat()
    names = list(flat) if memory_grad_from_rel else [k for k in flat if not k.startswith("memory_")]

    def f(p):
        L, _, grads = loss_and_grad(params.with_flat(p), e, u, z, g, opts)
        return L, grads

    def lo(p):
        return loss_and_grad(params.with_flat(p), e, u, z, g, opts, with_grad=False)[0]

    return grad_check(f, flat, TOL.grad_step, names=names, loss_only=lo)


def check_stopped_memory(seed: int) -> float:
    """With the relation path stopped, memory rows follow lambda * memory loss only."""
    _, partition, stats, kt, e, u, z, g = _instance(seed)
    params = init_predictor(partition, stats, e.shape[1], seed=seed, kt=kt)
    opts = LossOptions(lambda_mem=kt.lambda_mem, memory_grad_from_rel=False)
    flat = params.flat()

    def mem_only(p):
        _, dec, _ = loss_and_grad(params.with_flat(p), e, u, z, g, opts, with_grad=False)
        return kt.lambda_mem * (dec["L_mem.e"] + dec["L_mem.u"])

    def f(p):
        _, _, grads = loss_and_grad(params.with_flat(p), e, u, z, g, opts)
        return mem_only(p), grads

    return grad_check(f, flat, TOL.grad_step, names=["memory_e.V", "memory_u.V"], loss_only=mem_only)


CHECKS = {
    "linear_softmax_ce": check_linear_softmax_ce,
    "baseline": check_baseline,
    "transfer_chain": check_transfer_chain,
    "memory_loss": check_memory_loss,
    "relation_loss": check_relation_loss,
    "total_loss": check_total_loss,
    "stopped_memory": check_stopped_memory,
}


def run_suite(seeds, checks=None) -> tuple[list[GradResult], float]:
    """Run every check on every seed; returns results and elapsed seconds."""
    t0 = time.perf_counter()
    results = []
    for name in checks or CHECKS:
        for s in seeds:
            results.append(GradResult(name, int(s), CHECKS[name](int(s))))
    return results, time.perf_counter() - t0
