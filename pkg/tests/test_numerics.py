from __future__ import annotations

import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from docctx import numerics as nx
from docctx.numerics import Tensor
from gradsuite import OPS, op_max_rel_error


def rand(rng, *shape):
    return rng.uniform(-2.0, 2.0, size=shape)


def test_matmul_identity_and_annihilation():
    out = nx.matmul(Tensor(np.eye(2)), Tensor(np.array([[1.0, 2], [3, 4]])))
    assert np.array_equal(out.data, [[1, 2], [3, 4]])
    out = nx.matmul(Tensor(np.array([[1.0, 0]])), Tensor(np.array([[0.0], [5]])))
    assert np.array_equal(out.data, [[0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nx.ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_matmul_gradients_tight():
    rng = np.random.default_rng(0)
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    ra = nx.gradient_check(lambda t: nx.matmul(t, Tensor(b)).sum(), a)
    rb = nx.gradient_check(lambda t: nx.matmul(Tensor(a), t).sum(), b)
    assert ra.max_rel_error < 1e-6 and rb.max_rel_error < 1e-6


def test_softmax_examples():
    assert np.allclose(nx.softmax(Tensor(np.zeros(2))).data, [0.5, 0.5])
    big = nx.softmax(Tensor(np.array([1000.0, 0.0]))).data
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] == pytest.approx(0.0)


def test_softmax_high_precision_oracle():
    getcontext().prec = 50
    exps = [Decimal(v).exp() for v in (1, 2, 3)]
    total = sum(exps)
    want = [float(e / total) for e in exps]
    got = nx.softmax(Tensor(np.array([1.0, 2.0, 3.0]))).data
    assert np.max(np.abs(got - want)) < 1e-12


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
@settings(max_examples=60, deadline=None)
def test_softmax_rows_sum_to_one(x):
    out = nx.softmax(Tensor(x), axis=-1).data
    assert np.all(out >= 0)
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-12, rtol=0)


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    assert np.allclose(nx.layer_norm(Tensor(np.full(3, 5.0)), one, zero).data, 0.0)
    out = nx.layer_norm(Tensor(np.array([1.0, -1.0])), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    assert np.allclose(out, [1.0, -1.0], atol=1e-4)


def test_layer_norm_gradient_tight():
    rng = np.random.default_rng(1)
    x, g, b = rand(rng, 8), rand(rng, 8), rand(rng, 8)
    w = rand(rng, 8)
    rep = nx.gradient_check(lambda t: (nx.layer_norm(t, Tensor(g), Tensor(b)) * w).sum(), x)
    assert rep.max_rel_error < 1e-6


def scalar_cross_entropy(logits, targets, eps, pad):
    total, count = 0.0, 0
    for row, y in zip(logits, targets):
        if y == pad:
            continue
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        logp = [v - lse for v in row]
        total += (1 - eps) * -logp[y] + eps * -sum(logp) / len(row)
        count += 1
    return total / count


def test_cross_entropy_scalar_oracle():
    rng = np.random.default_rng(2)
    logits = rand(rng, 5, 7)
    targets = np.array([1, 0, 6, 3, 2])
    for eps in (0.0, 0.1):
        loss, tok = nx.cross_entropy(Tensor(logits), targets, label_smoothing=eps, pad_id=0)
        assert abs(loss.item() - scalar_cross_entropy(logits, targets, eps, 0)) < 1e-10
        assert tok[1] == 0.0


def test_cross_entropy_limits():
    loss, _ = nx.cross_entropy(Tensor(np.zeros((3, 4))), np.array([1, 2, 3]))
    assert loss.item() == pytest.approx(math.log(4))
    logits = np.full((2, 4), -1e4)
    logits[0, 1] = logits[1, 2] = 1e4
    loss, _ = nx.cross_entropy(Tensor(logits), np.array([1, 2]))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_cross_entropy_rejects_out_of_range_target():
    with pytest.raises(nx.VocabularyError):
        nx.cross_entropy(Tensor(np.zeros((2, 4))), np.array([1, 4]))


def test_embedding_rejects_unknown_id():
    with pytest.raises(nx.VocabularyError):
        nx.embedding(Tensor(np.zeros((3, 2))), np.array([[0, 3]]))


def test_gradient_check_trivial_cases():
    rep = nx.gradient_check(lambda t: t.sum(), np.array([0.3, -1.2, 2.0]))
    assert rep.max_rel_error == pytest.approx(0.0, abs=1e-9) and rep.passed
    rep = nx.gradient_check(lambda t: (t * t).sum(), np.zeros(1))
    assert rep.max_abs_error == 0.0 and rep.passed


def test_gradient_check_rejects_non_finite():
    with pytest.raises(nx.NumericError):
        nx.gradient_check(lambda t: t.sum(), np.array([np.nan]))
    with pytest.raises(nx.NumericError), np.errstate(invalid="ignore"):
        nx.gradient_check(lambda t: nx.log(t).sum(), np.array([1e-6]), h=1e-5)


def test_backward_visits_shared_node_once():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x
    z = y + y
    z.backward()
    assert np.allclose(x.grad, [8.0])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with nx.no_grad():
        y = (x * 3.0).sum()
    assert not y.requires_grad


def test_same_seed_same_stream():
    a = nx.make_rng(5, "init", "w").normal(size=8)
    b = nx.make_rng(5, "init", "w").normal(size=8)
    c = nx.make_rng(5, "init", "v").normal(size=8)
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_dropout_identity_without_rng():
    x = Tensor(np.arange(4.0))
    assert nx.dropout(x, 0.5, None) is x


@pytest.mark.parametrize("op", OPS)
def test_op_gradients_on_random_inputs(op):
    assert op_max_rel_error(op, n_instances=5, seed=11) < 1e-4
