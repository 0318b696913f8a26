import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cots import tensor as T
from cots.errors import AlignmentError, ConfigError, PreconditionError
from cots.objectives import (
    LossWeights,
    loss_i2t,
    loss_t2i,
    loss_task,
    loss_task_from_distributions,
    masked_token_loss,
    symmetric_kl,
    task_distributions,
    total_loss,
)
from cots.tensor import Tensor, grad_check


def _unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _vec_with_dots(dots, d=None):
    """A unit query plus rows whose dot products with it are exactly ``dots``."""
    d = d or len(dots) + 1
    q = np.zeros(d)
    q[0] = 1.0
    rows = np.zeros((len(dots), d))
    for i, c in enumerate(dots):
        rows[i, 0], rows[i, i + 1] = c, math.sqrt(max(0.0, 1 - c * c))
    return q[None, :], rows


# ----------------------------------------------------------- naive oracles


def naive_nce(q, pos, neg, tau):
    total = 0.0
    for i in range(q.shape[0]):
        sp = math.exp(sum(q[i, k] * pos[i, k] for k in range(q.shape[1])) / tau)
        sn = sum(math.exp(sum(q[i, k] * neg[j, k] for k in range(q.shape[1])) / tau) for j in range(neg.shape[0]))
        total += -math.log(sp / (sp + sn))
    return total / q.shape[0]


def naive_dist(q, pos, neg, tau):
    z = [sum(q[k] * pos[k] for k in range(len(q))) / tau]
    z += [sum(q[k] * neg[j, k] for k in range(len(q))) / tau for j in range(neg.shape[0])]
    e = [math.exp(v) for v in z]
    s = sum(e)
    return [v / s for v in e]


def naive_task(fv, fhl, nl, fl, fhv, nv, tau):
    total = 0.0
    for i in range(fv.shape[0]):
        p = naive_dist(fv[i], fhl[i], nl, tau)
        q = naive_dist(fl[i], fhv[i], nv, tau)
        total += sum(p[j] * math.log(p[j] / q[j]) + q[j] * math.log(q[j] / p[j]) for j in range(len(p)))
    return total / fv.shape[0]


def naive_ce(logits, targets):
    total = 0.0
    for row, t in zip(logits, targets):
        total += -(row[t] - math.log(sum(math.exp(v) for v in row)))
    return total / len(targets)


def test_brute_force_equivalence_over_random_instances():
    rng = np.random.default_rng(2024)
    for trial in range(120):
        n, L, d = (2, 3, 4) if trial < 20 else (int(rng.integers(1, 5)), int(rng.integers(0, 9)), int(rng.integers(2, 9)))
        tau = float(rng.uniform(0.05, 2.0))
        fv, fl, fhv, fhl = (_unit(rng, n, d) for _ in range(4))
        nv, nl = _unit(rng, L, d), _unit(rng, L, d)
        assert abs(loss_i2t(Tensor(fv), fhl, nl, tau).item() - naive_nce(fv, fhl, nl, tau)) < 1e-10
        assert abs(loss_t2i(Tensor(fl), fhv, nv, tau).item() - naive_nce(fl, fhv, nv, tau)) < 1e-10
        assert abs(loss_task(Tensor(fv), fhl, nl, Tensor(fl), fhv, nv, tau).item()
                   - naive_task(fv, fhl, nl, fl, fhv, nv, tau)) < 1e-10
        v = int(rng.integers(2, 12))
        logits = rng.standard_normal((n, v)) * 3
        targets = rng.integers(0, v, n)
        assert abs(masked_token_loss(Tensor(logits), targets).item() - naive_ce(logits, targets)) < 1e-10


# ----------------------------------------------------------- contrastive


@pytest.mark.parametrize("fn", [loss_i2t, loss_t2i])
def test_contrastive_examples(fn, rng):
    f = _unit(rng, 3, 5)
    assert fn(Tensor(f), _unit(rng, 3, 5), np.zeros((0, 5)), 0.05).item() == 0.0
    q, rows = _vec_with_dots([0.4, 0.4])
    for tau in (0.05, 1.0, 7.0):
        assert fn(Tensor(q), rows[:1], rows[1:], tau).item() == pytest.approx(math.log(2), abs=1e-12)
    q, rows = _vec_with_dots([1.0, 0.0, 0.0])
    expected = -math.log(math.e / (math.e + 2))
    assert fn(Tensor(q), rows[:1], rows[1:], 1.0).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.551444, abs=1e-6)
    with pytest.raises(ConfigError):
        fn(Tensor(q), rows[:1], rows[1:], 0.0)


def test_contrastive_loss_is_monotone_in_positive_similarity():
    prev = float("inf")
    for c in np.linspace(-0.9, 0.9, 19):
        q, rows = _vec_with_dots([c, 0.2, -0.1, 0.5])
        val = loss_i2t(Tensor(q), rows[:1], rows[1:], 0.1).item()
        assert val < prev
        prev = val


def test_gradient_reaches_only_the_online_query(rng):
    fv = Tensor(_unit(rng, 2, 4), requires_grad=True)
    with T.Graph() as g:
        loss = loss_i2t(fv, Tensor(_unit(rng, 2, 4), requires_grad=True), _unit(rng, 3, 4), 0.1)
    g.backward(loss)
    assert fv.grad is not None and np.abs(fv.grad).sum() > 0


# ----------------------------------------------------------- task-level


def test_task_distribution_examples(rng):
    f = _unit(rng, 1, 4)
    d = task_distributions(f, f, np.zeros((0, 4)), f, f, np.zeros((0, 4)), 0.05)
    assert d.d_i2t.tolist() == [1.0] and d.d_t2i.tolist() == [1.0]

    q, rows = _vec_with_dots([0.3, 0.3, 0.3, 0.3])
    d = task_distributions(q, rows[:1], rows[1:], q, rows[:1], rows[1:], 0.2)
    np.testing.assert_allclose(d.d_i2t, 0.25, atol=1e-15)
    np.testing.assert_allclose(d.d_t2i, 0.25, atol=1e-15)

    qa, ra = _vec_with_dots([1.0, 0.0])
    qb, rb = _vec_with_dots([0.0, 1.0])
    d = task_distributions(qa, ra[:1], ra[1:], qb, rb[:1], rb[1:], 1.0)
    s = 1 / (1 + math.exp(-1))
    np.testing.assert_allclose(d.d_i2t, [s, 1 - s], atol=1e-12)
    np.testing.assert_allclose(d.d_t2i, [1 - s, s], atol=1e-12)
    assert s == pytest.approx(0.731059, abs=1e-6)

    with pytest.raises(AlignmentError):
        task_distributions(qa, ra[:1], ra[1:], qb, rb[:1], np.zeros((0, 3)), 1.0)


@settings(max_examples=100)
@given(seed=st.integers(0, 2**31 - 1), L=st.integers(0, 8), tau=st.floats(0.02, 3.0))
def test_task_distributions_are_probabilities_and_tau_keeps_order(seed, L, tau):
    rng = np.random.default_rng(seed)
    args = [_unit(rng, 1, 5), _unit(rng, 1, 5), _unit(rng, L, 5), _unit(rng, 1, 5), _unit(rng, 1, 5), _unit(rng, L, 5)]
    d = task_distributions(*args, tau)
    d2 = task_distributions(*args, tau * 2.5)
    for p, p2 in ((d.d_i2t, d2.d_i2t), (d.d_t2i, d2.d_t2i)):
        assert abs(p.sum() - 1) < 1e-10 and np.all(p > 0) and p.shape == (L + 1,)
        np.testing.assert_array_equal(np.argsort(p, kind="stable"), np.argsort(p2, kind="stable"))


def test_symmetric_kl_examples():
    s = 1 / (1 + math.exp(-1))
    p, q = np.array([s, 1 - s]), np.array([1 - s, s])
    oracle = sum((a - b) * math.log(a / b) for a, b in zip(p, q))
    assert loss_task_from_distributions(p, q) == pytest.approx(oracle, abs=1e-14)
    assert oracle == pytest.approx((2 * s - 1) * 2.0, abs=1e-12)  # ln(s/(1-s)) = 1 for the logistic at 1
    assert loss_task_from_distributions(q, p) == loss_task_from_distributions(p, q)
    assert loss_task_from_distributions(p, p) == 0.0
    logits = Tensor(np.array([[0.3, -1.0, 2.0]]))
    assert symmetric_kl(logits, logits).item() == 0.0
    with pytest.raises(AlignmentError):
        loss_task_from_distributions(p, np.array([0.2, 0.3, 0.5]))


@settings(max_examples=100)
@given(seed=st.integers(0, 2**31 - 1))
def test_symmetric_kl_nonnegative_and_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = Tensor(rng.standard_normal((3, 6)) * 2), Tensor(rng.standard_normal((3, 6)) * 2)
    ab, ba = symmetric_kl(a, b).item(), symmetric_kl(b, a).item()
    assert ab >= 0 and abs(ab - ba) < 1e-12
    assert abs(symmetric_kl(a, Tensor(a.data + 4.0)).item()) < 1e-10  # shift-equal logits give equal distributions


# ----------------------------------------------------------- masked tokens


def test_masked_token_examples():
    for v in (3, 17, 100):
        assert masked_token_loss(Tensor(np.zeros((4, v))), [0, 1, 2, 0]).item() == pytest.approx(math.log(v), abs=1e-12)
    sat = np.zeros((1, 5))
    sat[0, 3] = 100.0
    assert masked_token_loss(Tensor(sat), [3]).item() < 1e-40
    val = masked_token_loss(Tensor(np.array([[1.0, 2.0, 3.0]])), [2]).item()
    assert val == pytest.approx(-math.log(math.e**3 / (math.e + math.e**2 + math.e**3)), abs=1e-14)
    assert val == pytest.approx(0.407606, abs=1e-6)
    with pytest.raises(IndexError):
        masked_token_loss(Tensor(np.zeros((1, 3))), [3])
    with pytest.raises(PreconditionError):
        masked_token_loss(Tensor(np.zeros((0, 3))), [])


# ----------------------------------------------------------- gradients


@pytest.mark.parametrize("seed", range(5))
def test_losses_pass_grad_check(seed):
    rng = np.random.default_rng(seed)
    n, L, d = int(rng.integers(1, 5)), int(rng.integers(1, 9)), int(rng.integers(2, 9))
    fhv, fhl, nv, nl = _unit(rng, n, d), _unit(rng, n, d), _unit(rng, L, d), _unit(rng, L, d)
    fv0, fl0 = _unit(rng, n, d), _unit(rng, n, d)

    assert grad_check(lambda x: loss_i2t(x, fhl, nl, 0.2), fv0) < 1e-4
    assert grad_check(lambda x: loss_t2i(x, fhv, nv, 0.2), fl0) < 1e-4
    assert grad_check(lambda a: loss_task(a, fhl, nl, Tensor(fl0), fhv, nv, 0.5), fv0) < 1e-4
    assert grad_check(lambda b: loss_task(Tensor(fv0), fhl, nl, b, fhv, nv, 0.5), fl0) < 1e-4
    targets = rng.integers(0, 7, n)
    assert grad_check(lambda z: masked_token_loss(z, targets), rng.standard_normal((n, 7))) < 1e-4


# ----------------------------------------------------------- composition


def test_total_loss_composition(rng):
    vals = {k: Tensor(float(rng.uniform(0.1, 3))) for k in ("l_i2t", "l_t2i", "l_task", "l_cmvm", "l_cmlm")}
    total, bd = total_loss(**vals)
    assert bd.l_inst == bd.l_i2t + bd.l_t2i
    assert bd.l_token == bd.l_cmvm + bd.l_cmlm
    assert abs(bd.total - (bd.l_inst + bd.l_token + bd.l_task)) < 1e-12
    assert total.item() == bd.total

    total, bd = total_loss(**vals, weights=LossWeights.from_triple(1, 0, 0))
    assert total.item() == bd.l_inst
    total, bd = total_loss()
    assert total.item() == 0.0 and bd.total == 0.0
    assert LossWeights.from_triple(0.5, 2, 3) == LossWeights(0.5, 2, 2, 3)
