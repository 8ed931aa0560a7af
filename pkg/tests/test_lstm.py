import math

import numpy as np
import pytest

from gradcheck import TOL, check_layer
from lanerisk.errors import DimensionError, StateError
from lanerisk.lstm import (
    GATES,
    LSTMCell,
    count_lstm_params,
    lstm_backward,
    lstm_forward,
    lstm_step,
)


def scalar_oracle(params, seq):
    """Reference recurrence written one unit at a time with math.* only."""
    hd = len(params["g.b"])
    h = [0.0] * hd
    c = [0.0] * hd
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))
    for z in seq:
        pre = {}
        for gate in GATES:
            w, u, b = params[f"{gate}.W"], params[f"{gate}.U"], params[f"{gate}.b"]
            pre[gate] = [
                sum(w[k][j] * z[j] for j in range(len(z)))
                + sum(u[k][j] * h[j] for j in range(hd))
                + b[k]
                for k in range(hd)
            ]
        new_c, new_h = [], []
        for k in range(hd):
            g, i, o = sig(pre["g"][k]), sig(pre["i"][k]), sig(pre["o"][k])
            ck = g * c[k] + i * math.tanh(pre["c"][k])
            new_c.append(ck)
            new_h.append(o * math.tanh(ck))
        h, c = new_h, new_c
    return np.array(h)


class TestStep:
    def test_zero_weights(self):
        cell = LSTMCell(3, 4)
        z = np.random.default_rng(0).normal(size=(2, 3))
        h, c, gates = cell.step(z, np.zeros((2, 4)), np.zeros((2, 4)))
        assert not h.any() and not c.any()
        for gate in gates[:3]:
            assert np.all(gate == 0.5)

    def test_scalar_hand_case(self):
        cell = LSTMCell(1, 1)
        for gate in GATES:
            cell.params[f"{gate}.W"][:] = 1.0
            cell.params[f"{gate}.U"][:] = 1.0
        h, c = lstm_step(cell, [1.0], [0.0], [1.0])
        s = 1.0 / (1.0 + math.exp(-1.0))
        want_c = s * 1.0 + s * math.tanh(1.0)
        want_h = s * math.tanh(want_c)
        assert c[0] == pytest.approx(want_c, abs=1e-12)
        assert h[0] == pytest.approx(want_h, abs=1e-12)
        assert c[0] == pytest.approx(1.287829, abs=1e-6)
        assert h[0] == pytest.approx(0.627655, abs=1e-6)

    def test_zero_cell_and_candidate(self):
        rng = np.random.default_rng(1)
        cell = LSTMCell(2, 3, rng=rng)
        cell.params["c.W"][:] = 0.0
        cell.params["c.U"][:] = 0.0
        _, c = lstm_step(cell, rng.normal(size=2), rng.normal(size=3), np.zeros(3))
        assert not c.any()

    def test_shape_error(self):
        with pytest.raises(DimensionError):
            lstm_step(LSTMCell(2, 3), np.zeros(3), np.zeros(3), np.zeros(3))


class TestForward:
    def test_single_step_equals_step(self):
        rng = np.random.default_rng(2)
        cell = LSTMCell(3, 2, rng=rng)
        z = rng.normal(size=3)
        h, _ = lstm_step(cell, z, np.zeros(2), np.zeros(2))
        np.testing.assert_array_equal(lstm_forward(cell, z[None]), h)

    def test_zero_sequence_fixed_point(self):
        cell = LSTMCell(2, 3, rng=np.random.default_rng(3))
        assert not lstm_forward(cell, np.zeros((6, 2))).any()

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_scalar_oracle(self, seed):
        rng = np.random.default_rng(seed)
        cell = LSTMCell(2, 2, rng=rng)
        for gate in GATES:
            cell.params[f"{gate}.b"][:] = rng.normal(size=2)
        seq = rng.normal(size=(3, 2))
        params = {k: v.tolist() for k, v in cell.params.items()}
        np.testing.assert_allclose(lstm_forward(cell, seq), scalar_oracle(params, seq), atol=1e-12)

    def test_wrong_step_count(self):
        with pytest.raises(DimensionError):
            lstm_forward(LSTMCell(2, 2, q=4), np.zeros((3, 2)))

    def test_batch_rows_independent(self):
        rng = np.random.default_rng(4)
        cell = LSTMCell(3, 4, rng=rng)
        x = rng.normal(size=(5, 6, 3))
        out = cell.forward(x)
        for b in range(5):
            np.testing.assert_allclose(out[b], lstm_forward(cell, x[b]), atol=1e-14)


class TestBackward:
    def test_before_forward(self):
        with pytest.raises(StateError):
            LSTMCell(2, 2).backward(np.zeros((1, 2)))

    def test_returns_all_twelve(self):
        rng = np.random.default_rng(5)
        cell = LSTMCell(2, 3, rng=rng)
        lstm_forward(cell, rng.normal(size=(4, 2)))
        grad_seq, grads = lstm_backward(cell, rng.normal(size=3))
        assert grad_seq.shape == (4, 2)
        assert sorted(grads) == sorted(f"{g}.{p}" for g in GATES for p in "WUb")

    @pytest.mark.parametrize("q", [1, 2, 5, 10])
    def test_finite_differences(self, q):
        rng = np.random.default_rng(100 + q)
        cell = LSTMCell(3, 2, q=q, rng=rng)
        for gate in GATES:
            cell.params[f"{gate}.b"][:] = rng.normal(size=2)
        errs = check_layer(cell, rng.normal(size=(2, q, 3)), rng)
        assert len(errs) == 13
        assert max(errs.values()) < TOL, errs


class TestParamCount:
    def test_formula(self):
        assert count_lstm_params(50, 20) == 4 * (50 * 20 + 400 + 20) == 5680
        assert count_lstm_params(1, 1) == 12

    def test_matches_cell(self):
        cell = LSTMCell(7, 5)
        assert count_lstm_params(cell) == cell.param_count()

    def test_rejects_zero_input(self):
        with pytest.raises(ValueError):
            count_lstm_params(0, 20)
