"""Dense numerics: softmax, cross-entropy, SGD and a finite-difference checker.

Vectors and matrices are plain float64 numpy arrays. Functions that take a
single vector also accept a batch (leading axes) and operate on the last axis.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import InvalidArgument, NumericalFailure

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class Tolerances:
    simplex_sum: float = 1e-12
    shift_invariance: float = 1e-9
    grad_rel_error: float = 1e-4
    grad_step: float = 1e-5
    forward_oracle: float = 1e-12
    prob_sum: float = 1e-9
    grad_floor: float = 1e-8


TOL = Tolerances()


def as_vec(v, name: str = "vector") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 0 or arr.shape[-1] == 0:
        raise InvalidArgument(f"{name} must be non-empty")
    return arr


def softmax(v) -> np.ndarray:
    """Max-shifted softmax along the last axis."""
    x = as_vec(v, "softmax input")
    shifted = x - x.max(axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def log_softmax(v) -> np.ndarray:
    x = as_vec(v, "log_softmax input")
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_targets(targets, n: int) -> np.ndarray:
    t = np.asarray(targets)
    if not np.issubdtype(t.dtype, np.integer):
        if not np.all(np.equal(np.mod(t, 1), 0)):
            raise InvalidArgument("class index must be an integer")
        t = t.astype(np.int64)
    if np.any(t < 0) or np.any(t >= n):
        raise InvalidArgument(f"class index out of range [0, {n})")
    return t


def cross_entropy(logits, g) -> float | np.ndarray:
    """-log softmax(logits)[g]; softmax is applied here, pass raw logits.

    With a batch of logits (B, C) and targets (B,), returns the per-row losses.
    """
    lp = log_softmax(logits)
    t = _check_targets(g, lp.shape[-1])
    if lp.ndim == 1:
        return float(-lp[int(t)])
    return -np.take_along_axis(lp, t.reshape(-1, 1), axis=-1)[:, 0]


def cross_entropy_probs(probs, g) -> float | np.ndarray:
    """-log probs[g] for an already normalized probability vector."""
    p = as_vec(probs, "probability vector")
    t = _check_targets(g, p.shape[-1])
    with np.errstate(divide="ignore"):
        if p.ndim == 1:
            return float(-np.log(p[int(t)]))
        return -np.log(np.take_along_axis(p, t.reshape(-1, 1), axis=-1)[:, 0])


def softmax_ce_grad(logits, g) -> np.ndarray:
    """Gradient of cross_entropy wrt the logits: softmax(logits) - onehot(g)."""
    p = softmax(logits)
    t = _check_targets(g, p.shape[-1])
    if p.ndim == 1:
        p[int(t)] -= 1.0
    else:
        p[np.arange(p.shape[0]), t] -= 1.0
    return p


class GradTape:
    """Additive gradient accumulator keyed by parameter name."""

    def __init__(self, params: Mapping[str, np.ndarray] | None = None):
        self.grads: Params = {}
        if params is not None:
            for name, value in params.items():
                self.grads[name] = np.zeros_like(value, dtype=np.float64)

    def add(self, name: str, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=np.float64)
        if name in self.grads:
            if self.grads[name].shape != grad.shape:
                raise InvalidArgument(
                    f"gradient for {name!r} has shape {grad.shape}, expected {self.grads[name].shape}"
                )
            self.grads[name] += grad
        else:
            self.grads[name] = grad.copy()

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]

    def __contains__(self, name: str) -> bool:
        return name in self.grads

    def items(self):
        return self.grads.items()


def sgd_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: float,
    momentum: float = 0.0,
    velocity: Params | None = None,
) -> tuple[Params, Params]:
    """One SGD update. Returns ``(new_params, new_velocity)``.

    Uses v <- momentum * v + g, p <- p - lr * v. Parameters without a gradient
    entry are carried over unchanged. Inputs are not mutated.
    """
    if lr < 0:
        raise InvalidArgument(f"learning rate must be >= 0, got {lr}")
    velocity = velocity or {}
    new_params: Params = {}
    new_velocity: Params = {}
    for name, p in params.items():
        if name not in grads:
            new_params[name] = p
            if name in velocity:
                new_velocity[name] = velocity[name]
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise InvalidArgument(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        v = momentum * velocity[name] + g if (momentum and name in velocity) else g
        new_params[name] = p - lr * v
        new_velocity[name] = v
    extra = set(grads) - set(params)
    if extra:
        raise InvalidArgument(f"gradients for unknown parameters: {sorted(extra)}")
    return new_params, new_velocity


def grad_check(
    loss_and_grad: Callable[[Params], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    h: float = TOL.grad_step,
    names: list[str] | None = None,
    loss_only: Callable[[Params], float] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grad(params)`` returns the scalar loss and a gradient dict.
    Parameters missing from the gradient dict are treated as having zero
    analytic gradient, so gradient-stopped paths are still checked.
    ``loss_only``, when given, is used for the perturbed evaluations.
    """
    base = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    loss0, analytic = loss_and_grad(base)
    if not np.isfinite(loss0):
        raise NumericalFailure("loss is not finite at the base point")
    loss = loss_only or (lambda p: loss_and_grad(p)[0])
    worst = 0.0
    for name in names if names is not None else list(base):
        value = base[name]
        ana = np.asarray(analytic.get(name, np.zeros_like(value)), dtype=np.float64)
        if ana.shape != value.shape:
            raise InvalidArgument(f"analytic gradient for {name!r} has shape {ana.shape}, expected {value.shape}")
        flat = value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = loss(base)
            flat[i] = orig - h
            lm = loss(base)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise NumericalFailure(f"loss is not finite when perturbing {name}[{i}]")
            num = (lp - lm) / (2.0 * h)
            a = ana.reshape(-1)[i]
            err = abs(a - num) / max(TOL.grad_floor, abs(a) + abs(num))
            worst = max(worst, err)
    return worst
