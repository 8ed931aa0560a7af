"""Many-to-one LSTM with backpropagation through time.

Gate recurrences, with ``g`` the forget gate::

    g_t = sigmoid(W_g z_t + U_g h_{t-1} + b_g)
    i_t = sigmoid(W_i z_t + U_i h_{t-1} + b_i)
    o_t = sigmoid(W_o z_t + U_o h_{t-1} + b_o)
    c_t = g_t * c_{t-1} + i_t * tanh(W_c z_t + U_c h_{t-1} + b_c)
    h_t = o_t * tanh(c_t)

Only the final hidden state ``h_T`` leaves the layer. Initial states are zero.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, StateError
from .layers import Layer, glorot_uniform
from .tensor import sigmoid

GATES = ("g", "i", "o", "c")


class LSTMCell(Layer):
    """LSTM layer with ``q`` timesteps, input size ``d`` and ``hidden`` units.

    Parameters live in ``params`` under ``<gate>.<W|U|b>`` with
    ``W: [hidden x d]``, ``U: [hidden x hidden]``, ``b: [hidden]``.
    """

    kind = "lstm"

    def __init__(self, d, hidden, q=None, rng=None):
        super().__init__()
        if d < 1 or hidden < 1:
            raise ValueError(f"LSTM needs d >= 1 and hidden >= 1, got d={d}, hidden={hidden}")
        if q is not None and q < 1:
            raise ValueError(f"LSTM needs q >= 1, got {q}")
        self.d = d
        self.hidden = hidden
        self.q = q
        for gate in GATES:
            if rng is None:
                w, u = np.zeros((hidden, d)), np.zeros((hidden, hidden))
            else:
                w = glorot_uniform(rng, (hidden, d), d, hidden)
                u = glorot_uniform(rng, (hidden, hidden), hidden, hidden)
            self.params[f"{gate}.W"] = w
            self.params[f"{gate}.U"] = u
            self.params[f"{gate}.b"] = np.zeros(hidden)
        self.need_input_grad = True
        self._cache = None

    def _stacked(self):
        p = self.params
        w = np.concatenate([p[f"{g}.W"] for g in GATES])
        u = np.concatenate([p[f"{g}.U"] for g in GATES])
        b = np.concatenate([p[f"{g}.b"] for g in GATES])
        return w, u, b

    def output_shape(self, input_shape):
        q, d = input_shape
        if d != self.d or (self.q is not None and q != self.q):
            raise DimensionError(
                f"LSTM expects ({self.q}, {self.d}) sequences, got {input_shape}"
            )
        return (self.hidden,)

    def step(self, z, h_prev, c_prev):
        """One recurrence step on batched ``(B, d)``, ``(B, h)``, ``(B, h)`` inputs.

        Returns ``(h_t, c_t, gates)`` where ``gates`` holds the four
        post-activation gate/candidate arrays.
        """
        w, u, b = self._stacked()
        return _step(w, u, b, self.hidden, z, h_prev, c_prev)

    def forward(self, x, training=False):
        if x.ndim != 3 or x.shape[2] != self.d:
            raise DimensionError(f"LSTM expects (B, q, {self.d}) input, got {x.shape}")
        n, q, _ = x.shape
        if self.q is not None and q != self.q:
            raise DimensionError(f"LSTM configured for {self.q} steps, got {q}")
        w, u, b = self._stacked()
        h = np.zeros((n, self.hidden))
        c = np.zeros((n, self.hidden))
        steps = []
        for t in range(q):
            h_new, c_new, gates = _step(w, u, b, self.hidden, x[:, t], h, c)
            steps.append((h, c, gates, c_new))
            h, c = h_new, c_new
        self._cache = (x, steps)
        return h

    def backward(self, grad_out):
        if self._cache is None:
            raise StateError("LSTM backward called before forward")
        x, steps = self._cache
        n, q, _ = x.shape
        if grad_out.shape != (n, self.hidden):
            raise DimensionError(
                f"grad_hT shape {grad_out.shape} != {(n, self.hidden)}"
            )
        w, u, _ = self._stacked()
        hd = self.hidden
        gw = np.zeros_like(w)
        gu = np.zeros_like(u)
        gb = np.zeros(4 * hd)
        grad_x = np.zeros_like(x)
        dh = grad_out
        dc = np.zeros((n, hd))
        for t in range(q - 1, -1, -1):
            h_prev, c_prev, (g, i, o, cand), c_t = steps[t]
            tc = np.tanh(c_t)
            do = dh * tc
            dc = dc + dh * o * (1.0 - tc * tc)
            da = np.concatenate(
                [
                    dc * c_prev * g * (1.0 - g),
                    dc * cand * i * (1.0 - i),
                    do * o * (1.0 - o),
                    dc * i * (1.0 - cand * cand),
                ],
                axis=1,
            )
            gw += da.T @ x[:, t]
            gu += da.T @ h_prev
            gb += da.sum(axis=0)
            grad_x[:, t] = da @ w
            dh = da @ u
            dc = dc * g
        for k, gate in enumerate(GATES):
            sl = slice(k * hd, (k + 1) * hd)
            self.grads[f"{gate}.W"] = gw[sl]
            self.grads[f"{gate}.U"] = gu[sl]
            self.grads[f"{gate}.b"] = gb[sl]
        return grad_x if self.need_input_grad else None


def _step(w, u, b, hd, z, h_prev, c_prev):
    a = z @ w.T + h_prev @ u.T + b
    g = sigmoid(a[:, :hd])
    i = sigmoid(a[:, hd : 2 * hd])
    o = sigmoid(a[:, 2 * hd : 3 * hd])
    cand = np.tanh(a[:, 3 * hd :])
    c = g * c_prev + i * cand
    h = o * np.tanh(c)
    return h, c, (g, i, o, cand)


def lstm_step(cell: LSTMCell, z_t, h_prev, c_prev):
    """Single unbatched step: ``z_t [d]``, ``h_prev [h]``, ``c_prev [h]``."""
    z_t = np.asarray(z_t, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    c_prev = np.asarray(c_prev, dtype=np.float64)
    if z_t.shape != (cell.d,) or h_prev.shape != (cell.hidden,) or c_prev.shape != (cell.hidden,):
        raise DimensionError(
            f"lstm_step expects z[{cell.d}], h[{cell.hidden}], c[{cell.hidden}]; "
            f"got {z_t.shape}, {h_prev.shape}, {c_prev.shape}"
        )
    h, c, _ = cell.step(z_t[None], h_prev[None], c_prev[None])
    return h[0], c[0]


def lstm_forward(cell: LSTMCell, sequence):
    """Run an unbatched ``[q x d]`` sequence and return ``h_T [h]``."""
    sequence = np.asarray(sequence, dtype=np.float64)
    if sequence.ndim != 2:
        raise DimensionError(f"sequence must be [q x d], got {sequence.shape}")
    return cell.forward(sequence[None])[0]


def lstm_backward(cell: LSTMCell, grad_hT):
    """Backward pass for the last :func:`lstm_forward` call.

    Returns ``(grad_sequence [q x d], grads)`` where ``grads`` maps the twelve
    parameter names to their gradients.
    """
    grad_hT = np.asarray(grad_hT, dtype=np.float64)
    grad_x = cell.backward(grad_hT[None])
    return grad_x[0], dict(cell.grads)


def count_lstm_params(cell_or_d, hidden=None) -> int:
    """``4 * (d*h + h*h + h)``; accepts a cell or explicit ``(d, hidden)``."""
    if isinstance(cell_or_d, LSTMCell):
        d, h = cell_or_d.d, cell_or_d.hidden
    else:
        d, h = cell_or_d, hidden
    if d is None or h is None or d < 1 or h < 1:
        raise ValueError(f"LSTM parameter count needs d >= 1 and h >= 1, got d={d}, h={h}")
    return 4 * (d * h + h * h + h)
