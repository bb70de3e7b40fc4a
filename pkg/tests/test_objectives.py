import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sctd import tensor as T
from sctd.data import IGNORE
from sctd.errors import ConfigError, ContractError, DimensionError
from sctd.objectives import (Distribution, LossBundle, is_sc_step, kl_div, mlm_loss, semantic_constraints,
                             token_losses, total_loss)

from conftest import numeric_grad, rel_err


def dist(p):
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    return Distribution(T.Tensor(p), np.ones(p.shape[0], dtype=bool))


def test_kl_reference_case_is_ln2():
    val = kl_div(dist([1.0, 0.0]), dist([0.5, 0.5])).item()
    assert abs(val - math.log(2.0)) < 1e-12


def test_kl_matches_direct_sum():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(6), size=4)
    q = rng.dirichlet(np.ones(6), size=4)
    want = np.mean(np.sum(p * (np.log(p) - np.log(q)), axis=1))
    assert abs(kl_div(dist(p), dist(q)).item() - want) < 1e-14


def test_kl_zero_at_identity_and_nonnegative():
    rng = np.random.default_rng(1)
    for _ in range(200):
        k = int(rng.integers(2, 12))
        p = rng.dirichlet(np.full(k, rng.uniform(0.1, 3)))
        q = rng.dirichlet(np.full(k, rng.uniform(0.1, 3)))
        assert kl_div(dist(p), dist(q)).item() >= -1e-9
        assert kl_div(dist(p), dist(p)).item() == 0.0


def test_kl_respects_support_rows():
    p = np.array([[1.0, 0.0], [0.2, 0.8]])
    q = np.array([[0.5, 0.5], [0.2, 0.8]])
    support = np.array([False, True])
    val = kl_div(Distribution(T.Tensor(p), support), Distribution(T.Tensor(q), support)).item()
    assert val == 0.0


def test_kl_shape_mismatch():
    with pytest.raises(ContractError):
        kl_div(dist([0.5, 0.5]), dist([0.2, 0.3, 0.5]))


def test_kl_gradient_wrt_student_logits():
    rng = np.random.default_rng(2)
    t_logits = rng.standard_normal((3, 5))
    s = T.Tensor(rng.standard_normal((3, 5)), requires_grad=True)

    def f():
        return kl_div(Distribution.from_logits(T.Tensor(t_logits)), Distribution.from_logits(s))

    T.backward(f())
    with T.no_grad():
        num = numeric_grad(lambda: f().item(), s.data)
    assert rel_err(s.grad, num) < 1e-7
    # closed form: d/dz_s KL(p_t || softmax(z_s)) = (p_s - p_t) / rows
    pt = np.exp(t_logits) / np.exp(t_logits).sum(1, keepdims=True)
    ps = np.exp(s.data) / np.exp(s.data).sum(1, keepdims=True)
    np.testing.assert_allclose(s.grad, (ps - pt) / 3, atol=1e-12)


def test_detached_teacher_equals_constant_teacher():
    rng = np.random.default_rng(3)
    z = rng.standard_normal((4, 6))
    w = T.Tensor(rng.standard_normal((6, 6)), requires_grad=True)
    teacher = T.Tensor(z) @ w
    student = T.Tensor(z * 0.5) @ w
    sc_g, _ = semantic_constraints(teacher, student, teacher, student, detach_teacher=True)
    T.backward(sc_g)
    g_detached = w.grad.copy()

    w.grad = None
    const = T.Tensor((T.Tensor(z) @ w).data)
    sc_g2, _ = semantic_constraints(const, T.Tensor(z * 0.5) @ w, const, const, detach_teacher=False)
    T.backward(sc_g2)
    np.testing.assert_allclose(g_detached, w.grad, atol=1e-14)


def test_undetached_teacher_receives_gradient():
    rng = np.random.default_rng(4)
    t = T.Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    s = T.Tensor(rng.standard_normal((2, 3)))
    sc_g, _ = semantic_constraints(t, s, t, s, detach_teacher=False)
    T.backward(sc_g)
    assert t.grad is not None and np.abs(t.grad).sum() > 0


def test_mlm_loss_matches_manual_cross_entropy():
    rng = np.random.default_rng(5)
    logits = rng.standard_normal((2, 3, 7))
    labels = np.array([[1, IGNORE, 4], [IGNORE, IGNORE, 0]])
    lp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    want = -np.mean([lp[0, 0, 1], lp[0, 2, 4], lp[1, 2, 0]])
    assert abs(mlm_loss(T.Tensor(logits), labels).item() - want) < 1e-14


def test_mlm_loss_uniform_logits_is_log_vocab():
    assert abs(mlm_loss(T.Tensor(np.zeros((4, 11))), np.array([0, 3, 5, 10])).item() - math.log(11)) < 1e-14


def test_mlm_loss_contracts():
    with pytest.raises(ContractError):
        mlm_loss(T.Tensor(np.zeros((2, 5))), np.array([IGNORE, IGNORE]))
    with pytest.raises(DimensionError):
        mlm_loss(T.Tensor(np.zeros((2, 5))), np.array([1, 2, 3]))
    with pytest.raises(ContractError):
        mlm_loss(T.Tensor(np.zeros((2, 5))), np.array([1, IGNORE]), mask_positions=np.array([True, True]))


def test_token_losses_match_mlm_loss():
    rng = np.random.default_rng(6)
    logits = rng.standard_normal((5, 9))
    labels = rng.integers(0, 9, 5)
    assert abs(token_losses(logits, labels).mean() - mlm_loss(T.Tensor(logits), labels).item()) < 1e-12


def test_total_loss_on_sc_step():
    b = total_loss(1.0, 2.0, 0.5, 0.5, t=10, interval=10, weight=0.05)
    assert b.is_sc_step and abs(b.total - 1.55) < 1e-15


def test_total_loss_on_vanilla_step_is_drop_loss():
    b = total_loss(1.25, None, None, None, t=7, interval=10, weight=0.05)
    assert not b.is_sc_step and b.total == 1.25 and b.mlm_base is None


def test_total_loss_with_weight_zero_and_equal_losses():
    b = total_loss(3.0, 3.0, 0.7, 0.1, t=4, interval=2, weight=0.0)
    assert b.total == 3.0


def test_total_loss_contracts():
    with pytest.raises(ContractError):
        total_loss(1.0, None, None, None, t=10, interval=10, weight=0.05)
    with pytest.raises(ConfigError):
        total_loss(1.0, None, None, None, t=0, interval=10, weight=0.05)
    with pytest.raises(ConfigError):
        total_loss(1.0, None, None, None, t=1, interval=0, weight=0.05)


def test_total_loss_backpropagates_weights():
    a, b, g, l = (T.Tensor(np.array(v), requires_grad=True) for v in (1.0, 2.0, 0.3, 0.4))
    bundle = total_loss(a, b, g, l, t=3, interval=3, weight=0.05)
    T.backward(bundle.objective)
    assert (a.grad, b.grad, g.grad, l.grad) == (0.5, 0.5, 0.05, 0.05)


@pytest.mark.parametrize("interval,n", [(1, 100), (10, 10), (7, 14), (None, 0), (100, 1), (101, 0)])
def test_sc_step_counts(interval, n):
    assert sum(is_sc_step(t, interval) for t in range(1, 101)) == n


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 8), st.integers(0, 2**31 - 1))
def test_kl_nonnegative_property(k, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(k) * 0.3)
    q = rng.dirichlet(np.ones(k) * 0.3)
    assert kl_div(dist(p), dist(q)).item() >= -1e-9


def test_loss_bundle_finiteness():
    assert LossBundle(1.0, None, None, None, 1.0, False).finite()
    assert not LossBundle(float("nan"), None, None, None, 1.0, False).finite()
