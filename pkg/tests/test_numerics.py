"""Kernel tests: masked linear algebra, reverse-mode gradients, Adam."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlw import numerics as nm
from dlw.numerics import AdamState, NumericsError, ParamStore, Tape


def make_store(**arrays):
    store = ParamStore(rng_seed=0)
    for name, value in arrays.items():
        value = np.asarray(value, dtype=np.float64)
        store.add(name, value.shape)
        store.view(name)[...] = value
    return store


def run_masked_linear(x, w, mask, b):
    store = make_store(w=w, b=b)
    tape = Tape()
    out = nm.masked_linear(
        nm.constant(np.asarray(x, dtype=np.float64), tape),
        nm.leaf(store, "w", tape),
        nm.leaf(store, "b", tape),
        None if mask is None else np.asarray(mask, dtype=np.float64),
        tape,
    )
    return out.value


class TestMaskedLinear:
    def test_identity(self):
        out = run_masked_linear([3.0, 5.0], np.eye(2), np.eye(2), [0.0, 0.0])
        assert np.array_equal(out, [3.0, 5.0])

    def test_strictly_lower_triangular_mask(self):
        # mask zeroes row 1 entirely and kills the second input in row 2
        mask = [[0.0, 0.0], [1.0, 0.0]]
        out = run_masked_linear([7.0, -2.0], np.ones((2, 2)), mask, [0.0, 0.0])
        assert np.array_equal(out, [0.0, 7.0])

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(42)
        w = rng.standard_normal((3, 3))
        mask = rng.integers(0, 2, (3, 3)).astype(float)
        x = rng.standard_normal(3)
        b = rng.standard_normal(3)
        expected = np.zeros(3)
        for i in range(3):
            for j in range(3):
                expected[i] += w[i, j] * mask[i, j] * x[j]
            expected[i] += b[i]
        out = run_masked_linear(x, w, mask, b)
        assert np.allclose(out, expected, atol=1e-14)

    def test_batched_rows_match_per_row(self):
        rng = np.random.default_rng(1)
        w = rng.standard_normal((4, 3))
        mask = rng.integers(0, 2, (4, 3)).astype(float)
        b = rng.standard_normal(4)
        X = rng.standard_normal((5, 3))
        batched = run_masked_linear(X, w, mask, b)
        for i in range(5):
            assert np.allclose(batched[i], run_masked_linear(X[i], w, mask, b))

    def test_dimension_mismatch_names_tensor(self):
        with pytest.raises(NumericsError, match="w"):
            run_masked_linear([1.0, 2.0, 3.0], np.eye(2), np.eye(2), [0.0, 0.0])
        with pytest.raises(NumericsError, match="mask"):
            run_masked_linear([1.0, 2.0], np.eye(2), np.eye(3), [0.0, 0.0])


class TestBackward:
    def test_square_derivative(self):
        store = make_store(w=np.array(3.0))
        tape = Tape()
        w = nm.leaf(store, "w", tape)
        loss = nm.total_sum(w * w)
        grads = nm.backward(tape, loss, store)
        assert grads[0] == pytest.approx(6.0, abs=1e-12)

    def test_sum_tanh_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        store = make_store(w=rng.uniform(-2, 2, (4, 3)))
        x = rng.uniform(-2, 2, 3)
        zeros = np.zeros(4)
        store.add("b", (4,))

        def value():
            return float(np.sum(np.tanh((store.view("w")) @ x + store.view("b"))))

        tape = Tape()
        out = nm.total_sum(
            nm.tanh(
                nm.masked_linear(
                    nm.constant(x, tape),
                    nm.leaf(store, "w", tape),
                    nm.leaf(store, "b", tape),
                    None,
                    tape,
                )
            )
        )
        grads = nm.backward(tape, out, store)
        step = 1e-5
        for i in range(store.size):
            orig = store.values[i]
            store.values[i] = orig + step
            hi = value()
            store.values[i] = orig - step
            lo = value()
            store.values[i] = orig
            fd = (hi - lo) / (2 * step)
            assert abs(grads[i] - fd) <= 1e-4 * max(abs(fd), abs(grads[i]), 1e-8)

    def test_unused_parameter_gets_zero_gradient(self):
        store = make_store(w=np.array(2.0), unused=np.array(5.0))
        tape = Tape()
        w = nm.leaf(store, "w", tape)
        loss = nm.total_sum(nm.square(w))
        grads = nm.backward(tape, loss, store)
        offset, _ = store.slot("unused")
        assert grads[offset] == 0.0

    def test_non_scalar_loss_rejected(self):
        store = make_store(w=np.array([1.0, 2.0]))
        tape = Tape()
        w = nm.leaf(store, "w", tape)
        vec = nm.square(w)
        with pytest.raises(NumericsError, match="scalar"):
            nm.backward(tape, vec, store)

    def test_deterministic_bit_for_bit(self):
        rng = np.random.default_rng(3)
        store = make_store(w=rng.standard_normal((6, 4)), b=rng.standard_normal(6))
        X = rng.standard_normal((8, 4))

        def gradient():
            tape = Tape()
            h = nm.masked_linear(
                nm.constant(X, tape),
                nm.leaf(store, "w", tape),
                nm.leaf(store, "b", tape),
                None,
                tape,
            )
            return nm.backward(tape, nm.mean(nm.tanh(h)), store)

        g1, g2 = gradient(), gradient()
        assert np.array_equal(g1, g2)


UNARY_OPS = {
    "tanh": (nm.tanh, np.tanh),
    "exp": (nm.exp, np.exp),
    "sigmoid": (nm.sigmoid, lambda v: 1.0 / (1.0 + np.exp(-v))),
    "square": (nm.square, np.square),
    "neg": (nm.neg, np.negative),
}


@pytest.mark.parametrize("name", sorted(UNARY_OPS))
def test_unary_op_gradients_match_finite_differences(name):
    op, ref = UNARY_OPS[name]
    rng = np.random.default_rng(11)
    store = make_store(p=rng.uniform(-2, 2, 5))
    tape = Tape()
    loss = nm.total_sum(op(nm.leaf(store, "p", tape)))
    grads = nm.backward(tape, loss, store)
    step = 1e-5
    for i in range(5):
        orig = store.values[i]
        store.values[i] = orig + step
        hi = float(np.sum(ref(store.view("p"))))
        store.values[i] = orig - step
        lo = float(np.sum(ref(store.view("p"))))
        store.values[i] = orig
        fd = (hi - lo) / (2 * step)
        assert abs(grads[i] - fd) <= 1e-4 * max(abs(fd), abs(grads[i]), 1e-8)


@given(st.lists(st.floats(-2, 2), min_size=2, max_size=6))
@settings(max_examples=30, deadline=None)
def test_binary_op_chain_gradient(values):
    # loss = sum((p * p) / (2 + p) + p) checked against central differences
    vals = np.asarray(values, dtype=np.float64)
    store = make_store(p=vals)

    def value():
        p = store.view("p")
        return float(np.sum(p * p / (2.5 + p) + p))

    tape = Tape()
    p = nm.leaf(store, "p", tape)
    loss = nm.total_sum((p * p) / (p + 2.5) + p)
    grads = nm.backward(tape, loss, store)
    step = 1e-5
    for i in range(vals.size):
        orig = store.values[i]
        store.values[i] = orig + step
        hi = value()
        store.values[i] = orig - step
        lo = value()
        store.values[i] = orig
        fd = (hi - lo) / (2 * step)
        assert abs(grads[i] - fd) <= 1e-4 * max(abs(fd), abs(grads[i]), 1e-7)


def reference_adam(w, grad_fn, lr, steps, beta1=0.9, beta2=0.999, eps=1e-8):
    """Independent scalar Adam used as the oracle."""
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        w -= lr * (m / (1 - beta1**t)) / (np.sqrt(v / (1 - beta2**t)) + eps)
    return w


class TestAdam:
    def test_zero_gradient_keeps_values(self):
        store = make_store(w=np.array([1.0, -2.0]))
        state = AdamState.for_params(store, lr=0.1)
        nm.adam_step(store, np.zeros(2), state)
        assert np.array_equal(store.values, [1.0, -2.0])
        assert state.t == 1

    def test_first_step_moves_by_learning_rate(self):
        store = make_store(w=np.array(5.0))
        state = AdamState.for_params(store, lr=0.1)
        nm.adam_step(store, np.array([1.0]), state)
        # bias-corrected m_hat = v_hat = 1, so the step is lr / (1 + eps)
        assert store.values[0] == pytest.approx(5.0 - 0.1 / (1 + 1e-8), abs=1e-15)

    def test_thousand_steps_approach_minimum(self):
        store = make_store(w=np.array(5.0))
        state = AdamState.for_params(store, lr=0.01)
        for _ in range(1000):
            nm.adam_step(store, store.values.copy(), state)
        # reference scalar Adam reaches w = 0.13533... after exactly 1000 steps
        oracle = reference_adam(5.0, lambda w: w, lr=0.01, steps=1000)
        assert store.values[0] == pytest.approx(oracle, abs=1e-12)
        assert abs(store.values[0]) < 0.15
        for _ in range(200):
            nm.adam_step(store, store.values.copy(), state)
        assert abs(store.values[0]) < 0.1

    def test_non_finite_gradient_names_parameter(self):
        store = make_store(a=np.array([1.0]), bad=np.array([2.0]))
        state = AdamState.for_params(store, lr=0.1)
        with pytest.raises(NumericsError, match="bad"):
            nm.adam_step(store, np.array([0.0, np.nan]), state)

    def test_zero_learning_rate_is_identity(self):
        rng = np.random.default_rng(5)
        store = make_store(w=rng.standard_normal(7))
        before = store.values.copy()
        state = AdamState.for_params(store, lr=0.0)
        nm.adam_step(store, rng.standard_normal(7), state)
        assert np.array_equal(store.values, before)
