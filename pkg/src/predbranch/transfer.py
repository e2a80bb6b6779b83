"""Memory-based knowledge transfer: coefficient, knowledge, gating, scaling, memory loss.

Every function works on a single vector or on a batch whose rows are samples.
The ``*_backward`` helpers return analytic gradients for batched use by the
trainer; they are checked against finite differences in the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .baseline import ClassStats
from .config import KTConfig
from .errors import InvalidArgument
from .numerics import softmax

__all__ = [
    "KTConfig", "Memory", "CoefficientProjector", "KTCache",
    "init_memory", "compute_coefficient", "compute_knowledge", "attention_gate",
    "enhance_feature", "memory_loss", "memory_loss_and_grad", "kt_forward", "kt_backward",
]


@dataclass
class Memory:
    V: np.ndarray  # (A, P), row i is the memory feature of class i
    trainable: bool = True


@dataclass
class CoefficientProjector:
    W: np.ndarray  # (c, P)


def init_memory(stats: ClassStats, stream: str) -> Memory:
    if stream == "e":
        return Memory(np.array(stats.avg_e, dtype=np.float64, copy=True))
    if stream == "u":
        return Memory(np.array(stats.avg_u, dtype=np.float64, copy=True))
    raise InvalidArgument(f"stream must be 'e' or 'u', got {stream!r}")


def _same_dim(x: np.ndarray, y: np.ndarray, what: str) -> None:
    if x.shape[-1] != y.shape[-1]:
        raise InvalidArgument(f"{what}: dimension mismatch {x.shape[-1]} vs {y.shape[-1]}")


def compute_coefficient(x, proj: CoefficientProjector | np.ndarray) -> np.ndarray:
    W = proj.W if isinstance(proj, CoefficientProjector) else np.asarray(proj, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != W.shape[1]:
        raise InvalidArgument(f"coefficient projector expects dim {W.shape[1]}, got {x.shape[-1]}")
    return softmax(x @ W.T)


def select_rows(V: np.ndarray, subset) -> np.ndarray:
    if subset is None:
        return V
    idx = np.asarray(sorted(int(i) for i in subset), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= V.shape[0]):
        raise InvalidArgument(f"subset index out of range [0, {V.shape[0]})")
    return V[idx]


def compute_knowledge(mem: Memory | np.ndarray, p_hat, subset=None) -> np.ndarray:
    """k = V_sel^T p_hat, with V_sel the rows of V indexed by ``subset`` in sorted order."""
    V = mem.V if isinstance(mem, Memory) else np.asarray(mem, dtype=np.float64)
    V_sel = select_rows(V, subset)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if p_hat.shape[-1] != V_sel.shape[0]:
        raise InvalidArgument(f"coefficient has {p_hat.shape[-1]} entries for {V_sel.shape[0]} memory rows")
    return p_hat @ V_sel


def attention_gate(x, y) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _same_dim(x, y, "attention_gate")
    return np.maximum(np.tanh(x + y), 0.0)


def enhance_feature(x, k, p_hat, cfg: KTConfig):
    """Return (x', m) with x' = alpha * m * (x + a*k), m = max(p_hat)."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    a = attention_gate(x, k)
    m = np.max(np.asarray(p_hat, dtype=np.float64), axis=-1)
    m_col = m[..., None] if np.ndim(m) else m
    return cfg.alpha * m_col * (x + a * k), (float(m) if np.ndim(m) == 0 else m)


def memory_loss_and_grad(x, V, g, cfg: KTConfig, weights=None):
    """Per-sample memory loss with gradients wrt x and V.

    The push term averages over the other A-1 memories but divides by A.
    Gradients are of sum_i weights_i * loss_i (weights default to 1).
    Returns (losses (B,), dx (B, P), dV (A, P)).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    V = np.asarray(V, dtype=np.float64)
    g = np.atleast_1d(np.asarray(g))
    A = V.shape[0]
    _same_dim(x, V, "memory_loss")
    if np.any(g < 0) or np.any(g >= A):
        raise InvalidArgument(f"class index out of range [0, {A})")
    B = x.shape[0]
    rows = np.arange(B)
    diff = x[:, None, :] - V[None, :, :]  # (B, A, P)
    dist = np.sqrt((diff ** 2).sum(-1))  # (B, A)
    pull_vec = diff[rows, g]  # x - v_g
    pull = (pull_vec ** 2).sum(-1)
    other = dist.copy()
    other[rows, g] = 0.0
    hinge = cfg.margin - other.sum(1) / A
    active = (hinge > 0) & (cfg.gamma > 0)
    losses = pull + cfg.gamma * np.maximum(hinge, 0.0)

    safe = np.where(dist > 0, dist, 1.0)
    unit = diff / safe[..., None]
    unit[dist == 0] = 0.0
    unit[rows, g] = 0.0
    w = np.ones(B) if weights is None else np.broadcast_to(np.asarray(weights, dtype=np.float64), (B,))
    coef = (w * np.where(active, cfg.gamma / A, 0.0))[:, None, None]
    push = coef * unit  # (B, A, P)
    pull_grad = 2.0 * w[:, None] * pull_vec
    dx = pull_grad - push.sum(1)
    dV = push.sum(0)
    np.add.at(dV, g, -pull_grad)
    return losses, dx, dV


def memory_loss(x, mem: Memory | np.ndarray, g, cfg: KTConfig):
    V = mem.V if isinstance(mem, Memory) else mem
    losses, _, _ = memory_loss_and_grad(x, V, g, cfg)
    return float(losses[0]) if np.ndim(x) == 1 else losses


@dataclass
class KTCache:
    x: np.ndarray
    W: np.ndarray
    V_sel: np.ndarray
    q: np.ndarray
    p_hat: np.ndarray
    k: np.ndarray
    a: np.ndarray
    m: np.ndarray
    s: np.ndarray
    out: np.ndarray
    alpha: float


def kt_forward(x: np.ndarray, W: np.ndarray, V_sel: np.ndarray, alpha: float) -> KTCache:
    """Batched coefficient -> knowledge -> gate -> scale for one stream."""
    q = x @ W.T
    p_hat = softmax(q)
    k = p_hat @ V_sel
    a = np.maximum(np.tanh(x + k), 0.0)
    m = p_hat.max(axis=1)
    s = x + a * k
    out = alpha * m[:, None] * s
    return KTCache(x, W, V_sel, q, p_hat, k, a, m, s, out, alpha)


def kt_backward(c: KTCache, d_out: np.ndarray, dq_extra: np.ndarray | None = None):
    """Gradients of a downstream loss through kt_forward.

    ``d_out`` is dL/d(out); ``dq_extra`` is an additional dL/dq from a loss
    applied directly to the coefficient logits. Returns (dx, dW, dV_sel).
    """
    ds = c.alpha * c.m[:, None] * d_out
    dm = c.alpha * (d_out * c.s).sum(1)
    t = np.tanh(c.x + c.k)
    gate_slope = np.where(t > 0, 1.0 - t * t, 0.0)
    dx = ds * (1.0 + c.k * gate_slope)
    dk = ds * (c.a + c.k * gate_slope)
    dp = dk @ c.V_sel.T
    rows = np.arange(dp.shape[0])
    dp[rows, np.argmax(c.p_hat, axis=1)] += dm
    dV_sel = c.p_hat.T @ dk
    dq = c.p_hat * (dp - (c.p_hat * dp).sum(1, keepdims=True))
    if dq_extra is not None:
        dq = dq + dq_extra
    dW = dq.T @ c.x
    dx = dx + dq @ c.W
    return dx, dW, dV_sel
