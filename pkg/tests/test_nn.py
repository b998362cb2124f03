import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from molvc.errors import InvalidInput, PoisonedStep, VerificationImpossible
from molvc.nn import (GRU, LSTM, Adam, Bidirectional, Conv1d, Embedding, Linear, LSTMCell, Module, Parameter,
                      ParameterStore, Tape, Tensor, adam_step, detach, grad_check, ops)

F64 = np.float64


def backward(loss):
    with Tape() as tape:
        out = loss()
    tape.backward(out)
    return out


def test_activation_constants():
    assert ops.softplus(Tensor(np.array(0.0))).item() == pytest.approx(np.log(2.0))
    np.testing.assert_allclose(ops.softmax(Tensor(np.zeros(5))).data, 0.2)
    x = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 3, 1))
    np.testing.assert_allclose(ops.instance_norm(x).data.ravel(), [-1.2247, 0.0, 1.2247], atol=1e-4)


@given(st.integers(2, 30), st.integers(1, 4), st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_instance_norm_moments(t, c, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, t, c)) * rng.uniform(0.1, 10, c) + rng.uniform(-5, 5, c)
    y = ops.instance_norm(Tensor(x)).data[0]
    assert np.all(np.abs(y.mean(axis=0)) <= 1e-6)
    np.testing.assert_allclose(y.std(axis=0), 1.0, atol=1e-3)


def test_sum_gives_ones_and_zero_loss_gives_zeros():
    p = Parameter(np.arange(6, dtype=F64).reshape(2, 3))
    p.grad = np.zeros_like(p.data)
    backward(lambda: ops.sum(p))
    np.testing.assert_array_equal(p.grad, np.ones((2, 3)))
    p.grad[:] = 0
    backward(lambda: ops.scale(ops.sum(ops.tanh(p)), 0.0))
    np.testing.assert_array_equal(p.grad, np.zeros((2, 3)))


def test_tape_consumed_once_and_scalar_only():
    p = Parameter(np.ones(3))
    p.grad = np.zeros(3)
    with Tape() as tape:
        loss = ops.sum(ops.mul(p, p))
    tape.backward(loss)
    with pytest.raises(InvalidInput):
        tape.backward(loss)
    with Tape() as tape:
        vec = ops.mul(p, p)
    with pytest.raises(InvalidInput):
        tape.backward(vec)


def test_shape_mismatch_names_shapes():
    with pytest.raises(InvalidInput, match=r"\(2, 3\)"):
        ops.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_linear_mse_grad_exact():
    rng = np.random.default_rng(0)
    lin = Linear(4, 3, rng, F64)
    x, y = rng.standard_normal((5, 4)), rng.standard_normal((5, 3))
    store = ParameterStore(lin)
    report = grad_check(lambda: ops.masked_mse(lin(Tensor(x))[None], y[None], np.ones((1, 5), bool)), store, 50)
    assert max(report.values()) <= 1e-7


class Composite(Module):
    def __init__(self, rng):
        super().__init__()
        self.conv = Conv1d(3, 4, 3, rng, F64)
        self.down = Conv1d(4, 4, 3, rng, F64, stride=2, padding=1, bias=False)  # feeds instance norm
        self.lstm = Bidirectional(LSTM, 4, 5, rng, F64)
        self.gru = Bidirectional(GRU, 10, 3, rng, F64)
        self.cell = LSTMCell(6, 4, rng, F64)
        self.lin = Linear(10, 2, rng, F64)
        self.emb = Embedding(5, 6, rng, F64)


def test_composite_grad_check():
    rng = np.random.default_rng(0)
    m = Composite(rng)
    store = ParameterStore(m)
    for _, p in store:
        p.data = p.data + 0.1 * rng.standard_normal(p.data.shape)
    x = rng.standard_normal((2, 16, 3))
    mask = np.ones((2, 8), bool)
    mask[1, 6:] = False
    tgt = rng.standard_normal((2, 8, 2))

    def loss():
        h = ops.tanh(m.conv(Tensor(x)))
        h = ops.instance_norm(m.down(h), mask)
        h = m.gru(m.lstm(h, mask), mask)
        hh, _ = m.cell(m.emb([1, 3]), m.cell.zero_state(2, F64))
        pooled = ops.max_pool1d(h, 2)
        y = m.lin(ops.concat([h, ops.expand_time(hh, 8)], -1))
        total = ops.add(ops.masked_mse(y, tgt, mask),
                        ops.masked_bce_with_logits(y[:, :, 0], tgt[:, :, 0] > 0, mask, 5.0))
        total = ops.add(total, ops.sum(ops.mul(ops.log_softmax(y, -1), tgt)))
        total = ops.add(total, ops.sum(ops.mul(ops.masked_softmax(y[:, :, 1], mask), tgt[:, :, 0])))
        return ops.add(total, ops.mean(ops.softplus(pooled)))

    report = grad_check(loss, store, n_coords=50, seed=1)
    assert max(report.values()) <= 1e-4, report


def test_detached_branch_gets_zero_gradient():
    rng = np.random.default_rng(1)
    a, b = Linear(3, 2, rng, F64), Linear(3, 2, rng, F64)
    x = Tensor(rng.standard_normal((4, 3)))
    for p in (a.weight, a.bias, b.weight, b.bias):
        p.grad = np.zeros_like(p.data)
    backward(lambda: ops.sum(ops.add(a(x), detach(b(x)))))
    assert np.any(a.weight.grad != 0)
    assert np.all(b.weight.grad == 0) and np.all(b.bias.grad == 0)


def test_grad_check_detects_nondeterminism():
    rng = np.random.default_rng(0)
    lin = Linear(2, 1, rng, F64)
    noise = np.random.default_rng(5)
    with pytest.raises(VerificationImpossible):
        grad_check(lambda: ops.sum(lin(Tensor(noise.standard_normal((3, 2))))), ParameterStore(lin), 5)


class Scalar(Module):
    def __init__(self, value=0.0):
        super().__init__()
        self.w = Parameter(np.array([value]))


def test_adam_examples():
    m = Scalar(1.0)
    store = ParameterStore(m)
    store.zero_grad()
    m.w.grad[:] = 1.0
    adam_step(store, lr=0.1, clip_norm=None)
    assert m.w.data[0] == pytest.approx(0.9, abs=1e-6)

    m = Scalar(2.0)
    store = ParameterStore(m)
    store.zero_grad()
    adam_step(store, lr=0.1)
    assert m.w.data[0] == 2.0


def test_adam_clipping_scales_gradient():
    m = Scalar(0.0)
    store = ParameterStore(m)
    opt = Adam(store, lr=0.1, clip_norm=1.0)
    store.zero_grad()
    m.w.grad[:] = 10.0
    assert opt.step() == pytest.approx(10.0)
    # first moment after clipping: (1 - beta1) * 1.0
    assert opt.m["w"][0] == pytest.approx(0.1)


def test_adam_poisoned_step_names_parameter():
    m = Scalar(0.0)
    store = ParameterStore(m)
    store.zero_grad()
    m.w.grad[:] = np.nan
    with pytest.raises(PoisonedStep, match="'w'"):
        adam_step(store)


def test_forward_deterministic():
    a = Composite(np.random.default_rng(3))
    b = Composite(np.random.default_rng(3))
    x = np.random.default_rng(4).standard_normal((1, 8, 4))
    mask = np.ones((1, 8), bool)
    np.testing.assert_array_equal(a.lstm(Tensor(x), mask).data, b.lstm(Tensor(x), mask).data)


def test_dropout_seeded():
    x = Tensor(np.ones((4, 50)))
    a = ops.dropout(x, 0.5, np.random.default_rng(0)).data
    b = ops.dropout(x, 0.5, np.random.default_rng(0)).data
    np.testing.assert_array_equal(a, b)
    assert set(np.unique(a)) <= {0.0, 2.0}
    np.testing.assert_array_equal(ops.dropout(x, 0.0, None).data, x.data)
