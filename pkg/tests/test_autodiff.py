import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bidlab.autodiff import Tape, TapeError, grad_check
from bidlab.controllers import GRU_PARAM_NAMES, GruParams, gru_cell, gru_step_tape


def scalar(tape, node):
    return tape.sum(node)


class TestForward:
    def test_primitives(self):
        tape = Tape()
        z = tape.const(np.zeros(3))
        assert np.all(tape.tanh(z).value == 0)
        assert np.all(tape.sigmoid(z).value == 0.5)
        v = tape.input("v", np.array([1.0, -2.0, 3.0]))
        assert np.array_equal(tape.matvec(tape.const(np.eye(3)), v).value, v.value)

    def test_replay_with_new_inputs(self):
        tape = Tape()
        x = tape.param("x", np.array(2.0))
        y = tape.input("y", np.array(3.0))
        out = x * y + tape.tanh(x)
        tape.forward({"x": np.array(1.0), "y": np.array(4.0)})
        assert out.value == pytest.approx(4.0 + np.tanh(1.0))

    def test_shape_mismatch(self):
        tape = Tape()
        tape.param("x", np.zeros(3))
        with pytest.raises(ValueError):
            tape.forward({"x": np.zeros(4)})

    def test_empty_tape(self):
        with pytest.raises(TapeError):
            Tape().forward()
        with pytest.raises(TapeError):
            Tape().backward(None)

    def test_dump(self):
        tape = Tape()
        x = tape.param("x", np.ones(2))
        tape.sum(tape.sigmoid(x))
        text = tape.dump()
        assert "param() x" in text and "sigmoid(0)" in text and "sum(1)" in text


class TestBackward:
    def test_product_rule(self):
        tape = Tape()
        x, y = tape.param("x", np.array(3.0)), tape.param("y", np.array(7.0))
        g = tape.backward(x * y)
        assert g["x"] == 7.0 and g["y"] == 3.0

    def test_tanh_at_zero(self):
        tape = Tape()
        x = tape.param("x", np.array(0.0))
        assert tape.backward(tape.tanh(x))["x"] == 1.0

    def test_constant_has_zero_gradient(self):
        tape = Tape()
        x = tape.param("x", np.ones(3))
        c = tape.const(np.arange(3.0))
        g = tape.backward(tape.sum(c * c))
        assert np.all(g["x"] == 0)

    def test_max_subgradient_at_tie_is_zero(self):
        tape = Tape()
        x = tape.param("x", np.array([0.0, 1.0, -1.0]))
        g = tape.backward(tape.sum(tape.maximum(x, 0.0)))
        assert g["x"].tolist() == [0.0, 1.0, 0.0]

    def test_quadratic_form(self, rng):
        A = rng.normal(size=(5, 5))
        A = A @ A.T

        def f(p):
            tape = Tape()
            x = tape.param("x", p["x"])
            out = tape.sum(x * tape.matvec(tape.const(A), x))
            return float(out.value), tape.backward(out)

        res = grad_check(f, {"x": rng.normal(size=5)})
        assert res.max_rel_error < 1e-9

    def test_kink_skipped(self):
        def f(p):
            tape = Tape()
            x = tape.param("x", p["x"])
            out = tape.sum(tape.maximum(x, 0.0))
            return float(out.value), tape.backward(out)

        res = grad_check(f, {"x": np.array([0.0])}, kink=lambda p: np.any(p["x"] == 0.0))
        assert res.skipped

    def test_gru_step_matches_finite_differences(self, rng):
        params = GruParams.init(5.0, rng, scale=0.5)
        h_in = gru_cell(np.tile(np.linspace(0.1, 0.4, 16), (3, 1)), rng.normal(size=(3, 4)), params)
        x_in = rng.normal(size=(3, 4))
        weights = {k: params.weights[k] for k in GRU_PARAM_NAMES if k != "h0"}

        def f(p):
            tape = Tape()
            w = {k: tape.param(k, v) for k, v in p.items()}
            h = gru_step_tape(tape, w, tape.const(h_in), tape.const(x_in), params.K)
            out = tape.sum(h * tape.const(np.arange(1.0, 17.0) / 16))
            return float(out.value), tape.backward(out)

        res = grad_check(f, weights, epsilon=1e-5)
        assert res.checked == sum(v.size for v in weights.values())
        assert res.max_rel_error < 1e-6

    def test_tape_matches_numpy_gru(self, rng):
        params = GruParams.init(5.0, rng, scale=0.5)
        h = np.abs(rng.normal(size=(2, 16))) * 0.3
        x = rng.normal(size=(2, 4))
        tape = Tape()
        w = {k: tape.const(v) for k, v in params.weights.items()}
        out = gru_step_tape(tape, w, tape.const(h), tape.const(x), params.K)
        assert np.allclose(out.value, gru_cell(h, x, params), atol=1e-14)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10**6), alpha=st.floats(-3, 3), beta=st.floats(-3, 3))
    def test_linearity(self, seed, alpha, beta):
        r = np.random.default_rng(seed)
        W = r.normal(size=(4, 4))
        x0 = r.normal(size=4)

        def build(tape, x):
            f = tape.sum(tape.tanh(tape.matvec(tape.const(W), x)))
            g = tape.sum(tape.sigmoid(x) * x)
            return f, g

        grads = []
        for combo in ((1.0, 0.0), (0.0, 1.0), (alpha, beta)):
            tape = Tape()
            x = tape.param("x", x0)
            f, g = build(tape, x)
            out = tape.affine(f, combo[0], 0.0) + tape.affine(g, combo[1], 0.0)
            grads.append(tape.backward(out)["x"])
        assert np.allclose(grads[2], alpha * grads[0] + beta * grads[1], atol=1e-12)

    def test_replay_determinism(self, rng):
        params = GruParams.init(5.0, rng)
        x_in = rng.normal(size=(4, 4))

        def run():
            tape = Tape()
            w = {k: tape.param(k, v) for k, v in params.weights.items()}
            h = tape.broadcast(tape.tanh(w["h0"]), (4, 16))
            for _ in range(5):
                h = gru_step_tape(tape, w, h, tape.const(x_in), params.K)
            return tape.backward(tape.sum(h))

        a, b = run(), run()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert a.is_finite()
