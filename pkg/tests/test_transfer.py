import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from predbranch.baseline import ClassStats
from predbranch.config import KTConfig
from predbranch.errors import InvalidArgument
from predbranch.numerics import grad_check, softmax
from predbranch.transfer import (CoefficientProjector, Memory, attention_gate, compute_coefficient,
                                 compute_knowledge, enhance_feature, init_memory, kt_backward, kt_forward,
                                 memory_loss, memory_loss_and_grad)

finite = st.floats(-50, 50, allow_nan=False)


def test_init_memory_copies_stats():
    st_ = ClassStats(np.full((2, 2), 0.5), np.array([[1.0, 2.0], [0.0, 0.0]]), np.ones((2, 2)),
                     np.array([1, 0]), [])
    m = init_memory(st_, "e")
    assert np.array_equal(m.V, st_.avg_e) and m.V is not st_.avg_e
    assert np.all(m.V[1] == 0)
    assert np.array_equal(init_memory(st_, "u").V, st_.avg_u)
    with pytest.raises(InvalidArgument):
        init_memory(st_, "z")


def test_coefficient_examples(rng):
    assert np.allclose(compute_coefficient(rng.normal(size=3), np.zeros((4, 3))), 0.25)
    W = np.array([[math.log(3)], [0.0]])
    assert np.allclose(compute_coefficient([1.0], CoefficientProjector(W)), [0.75, 0.25], atol=1e-15)
    W = rng.normal(size=(5, 3))
    x = rng.normal(size=3)
    assert np.allclose(compute_coefficient(x, W), softmax(W @ x), atol=1e-15)
    with pytest.raises(InvalidArgument):
        compute_coefficient(np.ones(2), W)


def test_knowledge_examples():
    assert np.allclose(compute_knowledge(np.eye(2), [0.5, 0.5]), [0.5, 0.5])
    V = np.array([[1.0, 0.0], [5.0, 5.0], [0.0, 1.0]])
    assert np.array_equal(compute_knowledge(Memory(V), [0, 1, 0]), V[1])
    assert np.allclose(compute_knowledge(V, [0.25, 0.75], subset={2, 0}), [0.25, 0.75], atol=1e-15)
    with pytest.raises(InvalidArgument):
        compute_knowledge(V, [0.5, 0.5], subset=[0, 3])
    with pytest.raises(InvalidArgument):
        compute_knowledge(V, [0.5, 0.5])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_knowledge_in_hull(seed):
    rng = np.random.default_rng(seed)
    V = rng.normal(size=(5, 3))
    k = compute_knowledge(V, rng.dirichlet(np.ones(5)))
    assert np.all(k >= V.min(0) - 1e-12) and np.all(k <= V.max(0) + 1e-12)


def test_gate_examples():
    assert np.all(attention_gate([1.0, -2.0], [-1.0, 2.0]) == 0)
    assert attention_gate([-0.5], [-0.5])[0] == 0.0
    assert attention_gate([0.25], [0.75])[0] == pytest.approx(0.761594, abs=1e-6)
    with pytest.raises(InvalidArgument):
        attention_gate([1.0], [1.0, 2.0])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite))
def test_gate_range(x, y):
    a = attention_gate(x, y)
    assert np.all(a >= 0) and np.all(a <= 1)
    # tanh saturates to exactly 1.0 in binary64 for large arguments; below that it is < 1
    assert np.all(a[(x + y) < 15] < 1)


def test_enhance_examples(rng):
    cfg = KTConfig(alpha=10.0)
    x = rng.normal(size=4)
    out, m = enhance_feature(x, np.zeros(4), [0, 1, 0], cfg)
    assert m == 1.0 and np.allclose(out, 10 * x)
    out, m = enhance_feature([1.0], [1.0], [0.5, 0.5], cfg)
    assert m == 0.5 and out[0] == pytest.approx(9.820, abs=1e-3)
    # identity when alpha * m = 1 and k = 0
    out, _ = enhance_feature(x, np.zeros(4), [0.25] * 4, KTConfig(alpha=4.0))
    assert np.allclose(out, x, atol=1e-15)


def test_enhance_scales_with_m(rng):
    x, k = rng.normal(size=3), rng.normal(size=3)
    lo, _ = enhance_feature(x, k, [0.5, 0.5], KTConfig())
    hi, _ = enhance_feature(x, k, [0.8, 0.2], KTConfig())
    assert np.linalg.norm(hi) == pytest.approx(np.linalg.norm(lo) * 0.8 / 0.5)


def test_memory_loss_hand_cases():
    cfg = KTConfig(gamma=0.01, margin=80.0)
    V = np.array([[0.0, 0.0], [100.0, 0.0]])
    assert memory_loss(np.zeros(2), V, 0, cfg) == pytest.approx(0.3, abs=1e-12)
    far = np.array([[0.0, 0.0], [1000.0, 0.0]])
    assert memory_loss(np.zeros(2), far, 0, cfg) == 0.0
    x = np.array([1.0, 2.0])
    assert memory_loss(x, far, 0, cfg) == 5.0
    with pytest.raises(InvalidArgument):
        memory_loss(x, far, 2, cfg)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000))
def test_memory_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    cfg = KTConfig(gamma=float(rng.uniform(0, 2)), margin=float(rng.uniform(0, 10)))
    losses, _, _ = memory_loss_and_grad(rng.normal(size=(4, 3)), rng.normal(size=(5, 3)), rng.integers(0, 5, 4), cfg)
    assert np.all(losses >= 0)


def test_memory_grad_zero_at_own_row():
    V = np.array([[1.0, 1.0], [500.0, 0.0], [0.0, 500.0]])
    _, dx, _ = memory_loss_and_grad(V[0], V, [0], KTConfig())
    assert np.all(dx == 0)


def test_memory_loss_weights_scale_grads(rng):
    x, V, g = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), np.array([0, 3, 3])
    cfg = KTConfig(gamma=0.5, margin=5.0)
    _, dx1, dV1 = memory_loss_and_grad(x, V, g, cfg)
    _, dx2, dV2 = memory_loss_and_grad(x, V, g, cfg, weights=2.0)
    assert np.allclose(dx2, 2 * dx1) and np.allclose(dV2, 2 * dV1)


@pytest.mark.parametrize("seed", range(5))
def test_memory_loss_gradients(seed):
    rng = np.random.default_rng(seed)
    g = rng.integers(0, 6, 4)
    cfg = KTConfig(gamma=0.5, margin=6.0)

    def f(p):
        losses, dx, dV = memory_loss_and_grad(p["x"], p["V"], g, cfg)
        return float(losses.sum()), {"x": dx, "V": dV}

    assert grad_check(f, {"x": rng.normal(size=(4, 8)), "V": rng.normal(size=(6, 8))}) <= 1e-4


def test_kt_forward_matches_pieces(rng):
    x, W, V = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    c = kt_forward(x, W, V, 10.0)
    for i in range(3):
        p = compute_coefficient(x[i], W)
        k = compute_knowledge(V, p)
        out, m = enhance_feature(x[i], k, p, KTConfig(alpha=10.0))
        assert np.allclose(c.out[i], out, atol=1e-12) and c.m[i] == m


@pytest.mark.parametrize("seed", range(5))
def test_kt_chain_gradients(seed):
    rng = np.random.default_rng(seed)
    probe = rng.normal(size=(3, 8))

    def f(p):
        c = kt_forward(p["x"], p["W"], p["V"], 1.5)
        dx, dW, dV = kt_backward(c, probe)
        return float((probe * c.out).sum()), {"x": dx, "W": dW, "V": dV}

    params = {"x": rng.normal(size=(3, 8)), "W": rng.normal(size=(4, 8)), "V": rng.normal(size=(4, 8))}
    assert grad_check(f, params) <= 1e-4
