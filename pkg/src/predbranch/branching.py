"""Branched relation predictor: a root group classifier plus one fine classifier per group.

A head maps (e, u, z) to a distribution over its own target set:

    p = softmax(W_e e' + W_u u' + W_z z)

where e', u' are the knowledge-enhanced features (or e, u unchanged when
knowledge transfer is off). The root head predicts the group, branch heads
predict a class within their group. A model with a single head over all
classes is the no-branch variant used by the ablation.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ._io import rng_for
from .baseline import ClassStats
from .clustering import GroupPartition
from .config import KTConfig, TrainConfig
from .errors import InvalidArgument
from .numerics import log_softmax, softmax
from .transfer import KTCache, Memory, init_memory, kt_backward, kt_forward, memory_loss_and_grad

WEIGHTS = ("W_e", "W_u", "W_z")
COEFS = ("C_e", "C_u")


@dataclass
class ClassifierHead:
    name: str
    targets: tuple[int, ...] | None  # global classes for a branch/single head; None for root
    n_out: int
    mem_subset: tuple[int, ...] | None  # memory rows used for knowledge; None = all
    W_e: np.ndarray
    W_u: np.ndarray
    W_z: np.ndarray
    C_e: np.ndarray | None = None  # coefficient projector, e-stream
    C_u: np.ndarray | None = None

    @property
    def is_root(self) -> bool:
        return self.targets is None

    def arrays(self) -> dict[str, np.ndarray]:
        out = {k: getattr(self, k) for k in WEIGHTS}
        for k in COEFS:
            if getattr(self, k) is not None:
                out[k] = getattr(self, k)
        return out


@dataclass
class LossOptions:
    lambda_mem: float = 1.0
    memory_grad_from_rel: bool = False
    off_branch_ce: bool = False
    coef_ce_u: bool = False
    mem_loss_per_classifier: bool = False

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "LossOptions":
        lam = cfg.kt.lambda_mem if cfg.knowledge_transfer else 0.0
        return cls(lam, cfg.memory_grad_from_rel, cfg.off_branch_ce, cfg.coef_ce_u, cfg.mem_loss_per_classifier)


@dataclass
class PredictorParams:
    heads: dict[str, ClassifierHead]
    partition: GroupPartition
    kt: KTConfig = field(default_factory=KTConfig)
    knowledge_transfer: bool = True
    memory_e: Memory | None = None
    memory_u: Memory | None = None

    @property
    def branched(self) -> bool:
        return "root" in self.heads

    @property
    def A(self) -> int:
        return self.partition.A

    def flat(self) -> dict[str, np.ndarray]:
        out = {}
        for hname, head in self.heads.items():
            for k, v in head.arrays().items():
                out[f"{hname}.{k}"] = v
        if self.memory_e is not None:
            out["memory_e.V"] = self.memory_e.V
            out["memory_u.V"] = self.memory_u.V
        return out

    def with_flat(self, flat: dict[str, np.ndarray]) -> "PredictorParams":
        heads = {}
        for hname, head in self.heads.items():
            kw = {k: flat[f"{hname}.{k}"] for k in head.arrays()}
            heads[hname] = replace(head, **kw)
        mem_e = Memory(flat["memory_e.V"], self.memory_e.trainable) if self.memory_e is not None else None
        mem_u = Memory(flat["memory_u.V"], self.memory_u.trainable) if self.memory_u is not None else None
        return replace(self, heads=heads, memory_e=mem_e, memory_u=mem_u)


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, shape)


def make_head(name, targets, n_out, mem_subset, A, P, kt: bool, seed: int) -> ClassifierHead:
    rng = rng_for(seed, "head", name)
    coef_dim = A if mem_subset is None else len(mem_subset)
    return ClassifierHead(
        name=name,
        targets=None if targets is None else tuple(int(t) for t in targets),
        n_out=n_out,
        mem_subset=None if mem_subset is None else tuple(int(t) for t in mem_subset),
        W_e=_uniform(rng, (n_out, P), P),
        W_u=_uniform(rng, (n_out, P), P),
        W_z=_uniform(rng, (n_out, A), A),
        C_e=_uniform(rng, (coef_dim, P), P) if kt else None,
        C_u=_uniform(rng, (coef_dim, P), P) if kt else None,
    )


def init_predictor(partition: GroupPartition, stats: ClassStats | None, P: int, *, seed: int,
                   kt: KTConfig | None = None, branch: bool = True,
                   knowledge_transfer: bool = True) -> PredictorParams:
    """Fresh predictor; memories start at the per-class feature means from ``stats``."""
    A = partition.A
    kt = kt or KTConfig()
    if branch and partition.num_groups < 2:
        raise InvalidArgument("a branched predictor needs at least two groups")
    heads: dict[str, ClassifierHead] = {}
    if branch:
        heads["root"] = make_head("root", None, partition.num_groups, None, A, P, knowledge_transfer, seed)
        for b, g in enumerate(partition.groups):
            heads[f"b{b}"] = make_head(f"b{b}", g, len(g), g, A, P, knowledge_transfer, seed)
    else:
        all_classes = tuple(range(A))
        heads["single"] = make_head("single", all_classes, A, None, A, P, knowledge_transfer, seed)
    mem_e = mem_u = None
    if knowledge_transfer:
        if stats is None:
            raise InvalidArgument("knowledge transfer needs class statistics to initialize memory")
        mem_e, mem_u = init_memory(stats, "e"), init_memory(stats, "u")
        if mem_e.V.shape != (A, P):
            raise InvalidArgument(f"class statistics have shape {mem_e.V.shape}, expected {(A, P)}")
    return PredictorParams(heads, partition, kt, knowledge_transfer, mem_e, mem_u)


@dataclass
class HeadTrace:
    """Forward quantities of one head for a batch (rows are samples)."""

    head: str
    p: np.ndarray
    logits: np.ndarray
    logits_e: np.ndarray
    logits_u: np.ndarray
    logits_z: np.ndarray
    e_prime: np.ndarray
    u_prime: np.ndarray
    p_hat_e: np.ndarray | None = None
    p_hat_u: np.ndarray | None = None
    m_e: np.ndarray | None = None
    m_u: np.ndarray | None = None
    cache_e: KTCache | None = None
    cache_u: KTCache | None = None
    inputs: tuple = ()


def _batch(x, dim: int, what: str) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != dim:
        raise InvalidArgument(f"{what} has dimension {x.shape[1]}, expected {dim}")
    return x


def head_forward(e, u, z, head: ClassifierHead, memory_e: Memory | None, memory_u: Memory | None,
                 kt: KTConfig, knowledge_transfer: bool = True) -> HeadTrace:
    P = head.W_e.shape[1]
    A = head.W_z.shape[1]
    e, u, z = _batch(e, P, "e"), _batch(u, P, "u"), _batch(z, A, "z")
    trace_kw = {}
    if knowledge_transfer:
        if head.C_e is None or memory_e is None:
            raise InvalidArgument(f"head {head.name} has no knowledge-transfer parameters")
        sub = None if head.mem_subset is None else list(head.mem_subset)
        Ve = memory_e.V if sub is None else memory_e.V[sub]
        Vu = memory_u.V if sub is None else memory_u.V[sub]
        ce = kt_forward(e, head.C_e, Ve, kt.alpha)
        cu = kt_forward(u, head.C_u, Vu, kt.alpha)
        e_p, u_p = ce.out, cu.out
        trace_kw = dict(p_hat_e=ce.p_hat, p_hat_u=cu.p_hat, m_e=ce.m, m_u=cu.m, cache_e=ce, cache_u=cu)
    else:
        e_p, u_p = e, u
    le = e_p @ head.W_e.T
    lu = u_p @ head.W_u.T
    lz = z @ head.W_z.T
    logits = le + lu + lz
    return HeadTrace(head.name, softmax(logits), logits, le, lu, lz, e_p, u_p, inputs=(e, u, z), **trace_kw)


def branch_forward(s, head: ClassifierHead, memories: tuple[Memory, Memory] | None, kt: KTConfig,
                   knowledge_transfer: bool = True) -> HeadTrace:
    """Forward one head for a single RelationSample (or any object with e, u, z)."""
    mem_e, mem_u = memories if memories is not None else (None, None)
    return head_forward(s.e, s.u, s.z, head, mem_e, mem_u, kt, knowledge_transfer)


def _soft_ce(logits: np.ndarray, Y: np.ndarray) -> np.ndarray:
    return -(Y * log_softmax(logits)).sum(1)


def head_targets(head: ClassifierHead, partition: GroupPartition, g: np.ndarray, off_branch_ce: bool):
    """Target distributions and per-sample weights for one head.

    Returns (Y, Yc, w): Y over the head outputs, Yc over the coefficient
    entries, w in {0, 1} masking samples that give this head no loss.
    """
    B = g.shape[0]
    rows = np.arange(B)
    A = partition.A
    if head.is_root:
        Y = np.zeros((B, head.n_out))
        Y[rows, partition.group_of[g]] = 1.0
        Yc = np.zeros((B, A))
        Yc[rows, g] = 1.0
        return Y, Yc, np.ones(B)
    targets = np.asarray(head.targets)
    local = np.full(A, -1, dtype=np.int64)
    local[targets] = np.arange(targets.size)
    t = local[g]
    inside = t >= 0
    Y = np.zeros((B, head.n_out))
    Y[rows[inside], t[inside]] = 1.0
    if off_branch_ce:
        Y[~inside] = 1.0 / head.n_out
        w = np.ones(B)
    else:
        w = inside.astype(np.float64)
    coef_dim = A if head.mem_subset is None else len(head.mem_subset)
    if head.mem_subset is None:
        Yc = np.zeros((B, coef_dim))
        Yc[rows, g] = 1.0
    else:
        Yc = Y.copy()
    return Y, Yc, w


def head_loss(trace: HeadTrace, Y: np.ndarray, Yc: np.ndarray, w: np.ndarray,
              knowledge_transfer: bool, coef_ce_u: bool = False) -> np.ndarray:
    """Per-sample relation loss: final, three auxiliary and coefficient cross-entropies."""
    total = _soft_ce(trace.logits, Y) + _soft_ce(trace.logits_e, Y) + _soft_ce(trace.logits_u, Y) \
        + _soft_ce(trace.logits_z, Y)
    if knowledge_transfer:
        total = total + _soft_ce(trace.cache_e.q, Yc)
        if coef_ce_u:
            total = total + _soft_ce(trace.cache_u.q, Yc)
    return w * total


def relation_loss(trace: HeadTrace, head: ClassifierHead, g_global: int, partition: GroupPartition,
                  knowledge_transfer: bool = True, coef_ce_u: bool = False) -> float:
    """Relation loss of one head for one sample with ground-truth class ``g_global``."""
    g = np.array([int(g_global)])
    if not 0 <= g[0] < partition.A:
        raise InvalidArgument(f"class {g_global} outside [0, {partition.A})")
    if not head.is_root and int(g_global) not in head.targets:
        raise InvalidArgument(f"class {g_global} is not in the target set of head {head.name}")
    Y, Yc, w = head_targets(head, partition, g, False)
    return float(head_loss(trace, Y, Yc, w, knowledge_transfer, coef_ce_u)[0])


def _head_backward(trace: HeadTrace, head: ClassifierHead, Y, Yc, scale, knowledge_transfer, opts: LossOptions):
    """Gradients of sum_i scale_i * head_loss_i wrt the head weights (and memory rows)."""
    e, u, z = trace.inputs
    s = scale[:, None]
    d_final = s * (softmax(trace.logits) - Y)
    d_le = d_final + s * (softmax(trace.logits_e) - Y)
    d_lu = d_final + s * (softmax(trace.logits_u) - Y)
    d_lz = d_final + s * (softmax(trace.logits_z) - Y)
    grads = {
        "W_e": d_le.T @ trace.e_prime,
        "W_u": d_lu.T @ trace.u_prime,
        "W_z": d_lz.T @ z,
    }
    dV = {}
    if knowledge_transfer:
        dq_e = s * (softmax(trace.cache_e.q) - Yc)
        dq_u = s * (softmax(trace.cache_u.q) - Yc) if opts.coef_ce_u else None
        _, grads["C_e"], dV["e"] = kt_backward(trace.cache_e, d_le @ head.W_e, dq_e)
        _, grads["C_u"], dV["u"] = kt_backward(trace.cache_u, d_lu @ head.W_u, dq_u)
    return grads, dV


def _head_terms(params: PredictorParams, name: str, trace: HeadTrace, g: np.ndarray, opts: LossOptions,
                with_grad: bool = True):
    """Per-sample loss, mask weights and batch-mean gradients for one head."""
    head = params.heads[name]
    B = g.shape[0]
    Y, Yc, w = head_targets(head, params.partition, g, opts.off_branch_ce)
    per = head_loss(trace, Y, Yc, w, params.knowledge_transfer, opts.coef_ce_u)
    grads: dict[str, np.ndarray] = {}
    if not with_grad:
        return per, w, grads
    hg, dV = _head_backward(trace, head, Y, Yc, w / B, params.knowledge_transfer, opts)
    for k, v in hg.items():
        grads[f"{name}.{k}"] = v
    if opts.memory_grad_from_rel:
        for stream, dv in dV.items():
            full = np.zeros_like(params.memory_e.V)
            if head.mem_subset is None:
                full += dv
            else:
                np.add.at(full, list(head.mem_subset), dv)
            grads[f"memory_{stream}.V"] = full
    return per, w, grads


def head_loss_and_grad(params: PredictorParams, name: str, e, u, z, g, opts: LossOptions | None = None,
                       with_grad: bool = True):
    """Batch-mean relation loss of a single head and its gradients by flat name."""
    opts = opts or LossOptions()
    g = np.atleast_1d(np.asarray(g, dtype=np.int64))
    head = params.heads[name]
    trace = head_forward(e, u, z, head, params.memory_e, params.memory_u, params.kt, params.knowledge_transfer)
    per, _, grads = _head_terms(params, name, trace, g, opts, with_grad)
    return float(per.mean()), grads


def forward_all(params: PredictorParams, e, u, z) -> dict[str, HeadTrace]:
    return {name: head_forward(e, u, z, head, params.memory_e, params.memory_u, params.kt,
                               params.knowledge_transfer)
            for name, head in params.heads.items()}


def loss_and_grad(params: PredictorParams, e, u, z, g, opts: LossOptions | None = None,
                  with_grad: bool = True):
    """Mean total loss over a batch, its decomposition, and gradients by flat name.

    total = sum over heads of relation loss + lambda_mem * (memory loss e + memory loss u)
    """
    opts = opts or LossOptions(lambda_mem=params.kt.lambda_mem if params.knowledge_transfer else 0.0)
    g = np.atleast_1d(np.asarray(g, dtype=np.int64))
    if np.any(g < 0) or np.any(g >= params.A):
        raise InvalidArgument(f"class index out of range [0, {params.A})")
    B = g.shape[0]
    traces = forward_all(params, e, u, z)
    decomposition: dict[str, float] = {}
    grads: dict[str, np.ndarray] = {}
    total = np.zeros(B)
    n_heads_used = np.zeros(B)
    for name, head in params.heads.items():
        per, w, hgrads = _head_terms(params, name, traces[name], g, opts, with_grad)
        total += per
        n_heads_used += w
        decomposition[f"L_rel.{name}"] = float(per.mean())
        for k, v in hgrads.items():
            grads[k] = grads[k] + v if k in grads else v
    decomposition["L_rel"] = float(total.mean())
    if params.knowledge_transfer:
        mult = n_heads_used if opts.mem_loss_per_classifier else np.ones(B)
        e2, u2, _ = traces[next(iter(traces))].inputs
        for stream, x, mem in (("e", e2, params.memory_e), ("u", u2, params.memory_u)):
            lm, _, dV = memory_loss_and_grad(x, mem.V, g, params.kt, opts.lambda_mem * mult / B)
            decomposition[f"L_mem.{stream}"] = float((mult * lm).mean())
            total += opts.lambda_mem * mult * lm
            if with_grad:
                key = f"memory_{stream}.V"
                grads[key] = grads.get(key, np.zeros_like(mem.V)) + dV
    L = float(total.mean())
    decomposition["L"] = L
    return L, decomposition, grads


def total_loss(sample, params: PredictorParams, opts: LossOptions | None = None):
    """(L, decomposition) for a single sample."""
    L, dec, _ = loss_and_grad(params, sample.e, sample.u, sample.z, [sample.g], opts, with_grad=False)
    return L, dec


def _chosen_branch(p_root: np.ndarray) -> np.ndarray:
    """Group 0 only when its probability is strictly largest; ties go to the later group."""
    G = p_root.shape[1]
    return G - 1 - np.argmax(p_root[:, ::-1], axis=1)


def route_and_score(params: PredictorParams, e, u, z, mode: str = "hard"):
    """Scores over all A classes and the chosen branch for each row.

    Hard mode: the chosen branch's classes score 2 + p_b (so they rank above
    every other class), the rest score their own branch probability. Soft
    mode: score_j = p_root[group(j)] * p_group(j)[local(j)]. Single-head
    models return their probabilities and chosen branch -1.
    """
    if mode not in ("hard", "soft"):
        raise InvalidArgument(f"routing mode must be 'hard' or 'soft', got {mode!r}")
    traces = forward_all(params, e, u, z)
    if not params.branched:
        p = traces["single"].p
        return p, np.full(p.shape[0], -1, dtype=np.int64)
    p_root = traces["root"].p
    B = p_root.shape[0]
    chosen = _chosen_branch(p_root)
    scores = np.zeros((B, params.A))
    for b, group in enumerate(params.partition.groups):
        pb = traces[f"b{b}"].p
        cols = list(group)
        if mode == "soft":
            scores[:, cols] = p_root[:, b:b + 1] * pb
        else:
            bonus = np.where(chosen == b, 2.0, 0.0)[:, None]
            scores[:, cols] = bonus + pb
    return scores, chosen
