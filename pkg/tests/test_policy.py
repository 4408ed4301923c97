import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import mtshare.tensor as T
from mtshare.errors import DimensionMismatch, ZeroVector
from mtshare.policy import (LOG_PI_FLOOR, PolicyState, policy_regularization,
                            sample_policy, soft_policy, task_correlation,
                            temperature_schedule, total_loss)
from mtshare.tensor import Tensor

from test_tensor import numeric_grad


# ---- soft policy ----

def test_soft_policy_uniform_logits_zero_gumbel():
    p = soft_policy(np.zeros(3), np.zeros(3), tau=1.0)
    assert np.allclose(p, [1 / 3] * 3, atol=1e-12)


def test_soft_policy_squares_pi_at_half_temperature():
    # G = 0, tau = 0.5: probabilities proportional to pi^2
    logits = np.log([0.2, 0.3, 0.5])
    p = soft_policy(logits, np.zeros(3), tau=0.5)
    sq = np.array([0.04, 0.09, 0.25])
    assert np.allclose(p, sq / sq.sum(), atol=1e-10)
    assert np.allclose(p, [0.10526316, 0.23684211, 0.65789474], atol=1e-6)


def test_soft_policy_tensor_matches_numpy():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 3))
    g = rng.gumbel(size=(2, 3))
    p_np = soft_policy(logits, g, tau=1.7)
    p_t = soft_policy(Tensor(logits, requires_grad=True), g, tau=1.7)
    assert np.allclose(p_np, p_t.data, atol=1e-12)


def test_soft_policy_low_tau_approaches_argmax():
    logits = np.array([0.1, 2.0, -1.0])
    g = np.array([0.3, -0.2, 0.1])
    p = soft_policy(logits, g, tau=1e-4)
    hard = np.zeros(3)
    hard[np.argmax(np.log(np.exp(logits) / np.exp(logits).sum()) + g)] = 1.0
    assert np.allclose(p, hard, atol=1e-8)


def test_soft_policy_log_floor():
    # one branch with vanishing mass: floored log pi keeps values finite
    logits = np.array([0.0, 0.0, -1e9])
    p = soft_policy(logits, np.zeros(3), tau=1.0)
    assert np.isfinite(p).all()
    assert p[2] == pytest.approx(math.exp(LOG_PI_FLOOR) /
                                 (2 + math.exp(LOG_PI_FLOOR)), rel=1e-6)


def test_soft_policy_rejects_nonpositive_tau():
    with pytest.raises(ValueError):
        soft_policy(np.zeros(3), np.zeros(3), tau=0.0)


def test_soft_policy_gradient_finite_diff():
    rng = np.random.default_rng(4)
    g = rng.gumbel(size=(3,))
    lg = Tensor(rng.normal(size=(3,)), requires_grad=True)
    target = rng.normal(size=3)

    def loss():
        return T.tsum(soft_policy(lg, g, tau=0.8) * target)

    lg.zero_grad()
    loss().backward()
    num = numeric_grad(lambda: loss().data.item(), lg.data)
    assert np.allclose(lg.grad, num, atol=1e-6)


# ---- regularizer ----

def test_reg_uniform_single_node():
    # uniform triple, one node, one task: 2*ln 2
    p = [[np.array([1 / 3, 1 / 3, 1 / 3])]]
    assert policy_regularization(p) == pytest.approx(2 * math.log(2), abs=1e-12)


def test_reg_uniform_two_nodes():
    # depth weights 1 and 1/2 -> 3*ln 2
    triple = np.array([1 / 3, 1 / 3, 1 / 3])
    p = [[triple, triple]]
    assert policy_regularization(p) == pytest.approx(3 * math.log(2), abs=1e-12)


def test_reg_all_shared_floor():
    # P' = (1,0,0): 2*softplus(-1) = 2*ln(1+e^-1)
    p = [[np.array([1.0, 0.0, 0.0])]]
    assert policy_regularization(p) == pytest.approx(2 * math.log(1 + math.exp(-1)),
                                                     abs=1e-12)
    assert policy_regularization(p) == pytest.approx(0.626523, abs=1e-6)


def test_reg_two_way_drops_skip_term():
    p = [[np.array([0.5, 0.5])]]
    assert policy_regularization(p) == pytest.approx(math.log(2), abs=1e-12)


def test_reg_sums_over_tasks():
    triple = np.array([1 / 3, 1 / 3, 1 / 3])
    one = policy_regularization([[triple]])
    two = policy_regularization([[triple], [triple]])
    assert two == pytest.approx(2 * one, abs=1e-12)


def test_reg_tensor_matches_numpy_and_grad():
    rng = np.random.default_rng(2)
    raw = [rng.dirichlet(np.ones(3)) for _ in range(3)]
    num_val = policy_regularization([raw])
    tens = [Tensor(r.copy(), requires_grad=True) for r in raw]
    t_val = policy_regularization([tens])
    assert t_val.data.item() == pytest.approx(num_val, abs=1e-12)
    t_val.backward()
    for t in tens:
        num = numeric_grad(
            lambda: policy_regularization([[x.data for x in tens]]), t.data)
        assert np.allclose(t.grad, num, atol=1e-6)


@given(st.integers(2, 6), st.integers(0, 10**6))
@settings(max_examples=40, deadline=None)
def test_reg_depth_weighting_monotone(L, seed):
    # the same non-shared distribution is penalized more at shallower depth
    rng = np.random.default_rng(seed)
    triple = rng.dirichlet(np.ones(3))
    uniform = np.array([1 / 3, 1 / 3, 1 / 3])
    vals = []
    for pos in range(L):
        per_task = [uniform.copy() for _ in range(L)]
        per_task[pos] = triple
        vals.append(policy_regularization([per_task]))
    base = policy_regularization([[uniform.copy() for _ in range(L)]])
    deltas = [v - base for v in vals]
    sign = np.sign(deltas[0])
    for a, b in zip(deltas, deltas[1:]):
        if sign > 0:
            assert b <= a + 1e-12
        elif sign < 0:
            assert b >= a - 1e-12


@given(st.floats(0.05, 0.9))
@settings(max_examples=40, deadline=None)
def test_reg_decreases_as_mass_moves_to_shared(extra):
    # moving probability mass from specific/skip to shared lowers the penalty
    before = np.array([1 / 3, 1 / 3, 1 / 3])
    shift = extra * (2 / 3)
    after = np.array([1 / 3 + shift, 1 / 3 - shift / 2, 1 / 3 - shift / 2])
    assert policy_regularization([[after]]) < policy_regularization([[before]])


def test_total_loss_combination():
    losses = [Tensor(np.array(2.0)), Tensor(np.array(4.0))]
    out = total_loss(losses, [1.0, 0.5], Tensor(np.array(10.0)), 0.1)
    assert out.data.item() == pytest.approx(2.0 + 2.0 + 1.0)
    no_reg = total_loss(losses, [1.0, 0.5], None, 0.0)
    assert no_reg.data.item() == pytest.approx(4.0)


# ---- temperature schedule ----

def test_temperature_schedule_endpoints_and_shape():
    assert temperature_schedule(0, 100) == pytest.approx(5.0)
    assert temperature_schedule(100, 100) == pytest.approx(0.5)
    assert temperature_schedule(50, 100) == pytest.approx(math.sqrt(5.0 * 0.5))
    vals = [temperature_schedule(i, 10) for i in range(11)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    # exponential: constant ratio between consecutive steps
    ratios = [b / a for a, b in zip(vals, vals[1:])]
    assert np.allclose(ratios, ratios[0], atol=1e-12)
    with pytest.raises(ValueError):
        temperature_schedule(0, 10, tau_start=0.1, tau_end=0.5)


# ---- sampling ----

def test_sample_policy_deterministic_and_shaped():
    logits = [np.zeros((2, 3)) for _ in range(4)]
    state = PolicyState(logits, temperature=1.0)
    a = sample_policy(state, 123)
    b = sample_policy(state, 123)
    assert np.array_equal(a, b)
    assert a.shape == (2, 4)
    assert set(np.unique(a)) <= {0, 1, 2}


def test_sample_policy_frequencies_match_pi():
    # pi = (0.2, 0.3, 0.5); Gumbel-max sampling frequencies converge to pi
    logits = [np.log([[0.2, 0.3, 0.5]])]
    state = PolicyState(logits, temperature=1.0)
    counts = np.zeros(3)
    n = 100_000
    draws = sample_policy(PolicyState([np.tile(logits[0], (1, 1))] * n,
                                      temperature=1.0), 7)[0]
    for d in draws:
        counts[d] += 1
    freq = counts / n
    assert np.allclose(freq, [0.2, 0.3, 0.5], atol=0.01)


def test_sample_policy_respects_two_way_nodes():
    state = PolicyState([np.zeros((2, 3)), np.zeros((2, 2))], temperature=1.0)
    for seed in range(50):
        pol = sample_policy(state, seed)
        assert (pol[:, 1] <= 1).all()


def test_policy_state_pis_normalized():
    rng = np.random.default_rng(0)
    state = PolicyState([rng.normal(size=(3, 3)) for _ in range(2)], 1.0)
    for pi in state.pis():
        assert np.allclose(pi.sum(axis=1), 1.0, atol=1e-12)
        assert (pi > 0).all()


# ---- correlation ----

def test_task_correlation_discrete():
    pol = np.array([[0, 0, 1], [0, 0, 1], [1, 2, 0]])
    m = task_correlation(pol)
    assert m[0, 1] == pytest.approx(1.0)
    assert m[0, 2] == pytest.approx(0.0)
    assert np.allclose(np.diag(m), 1.0)
    assert np.allclose(m, m.T)


def test_task_correlation_soft():
    a = [np.array([0.8, 0.1, 0.1]), np.array([0.6, 0.2, 0.2])]
    b = [np.array([0.8, 0.1, 0.1]), np.array([0.6, 0.2, 0.2])]
    m = task_correlation([a, b])
    assert m[0, 1] == pytest.approx(1.0)


def test_task_correlation_errors():
    with pytest.raises(DimensionMismatch):
        task_correlation([[np.zeros(3) + 1]])  # single task
    with pytest.raises(DimensionMismatch):
        task_correlation([[np.ones(3)], [np.ones(2)]])
    with pytest.raises(ZeroVector):
        task_correlation([[np.zeros(3)], [np.ones(3)]])
