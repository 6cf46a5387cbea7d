"""Stacked LSTM cell with a softmax decoder, plus truncated BPTT.

Gate blocks are stored row-stacked in the order input, forget, output,
candidate. Weights use the (out, in) convention throughout the package.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from ..errors import ArgumentError, ConfigurationError, NumericError
from .losses import softmax

GATES = ("input", "forget", "output", "candidate")
FORGET_BIAS = 1.0


@dataclass
class LSTMLayer:
    w_x: np.ndarray  # (4H, in)
    w_h: np.ndarray  # (4H, H)
    b: np.ndarray  # (4H,)


@dataclass
class LSTMParams:
    layers: List[LSTMLayer]
    w_e: np.ndarray  # (C, H) decoder
    b_e: np.ndarray  # (C,)

    def __post_init__(self):
        h = self.hidden_dim
        for k, layer in enumerate(self.layers):
            want_in = self.input_dim if k == 0 else h
            if layer.w_x.shape != (4 * h, want_in) or layer.w_h.shape != (4 * h, h) \
                    or layer.b.shape != (4 * h,):
                raise ConfigurationError(f"LSTM layer {k} has inconsistent gate block shapes")
        if self.w_e.shape[1] != h or self.b_e.shape != (self.w_e.shape[0],):
            raise ConfigurationError("decoder must map hidden_dim to the class count")

    @property
    def input_dim(self) -> int:
        return self.layers[0].w_x.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.layers[0].w_h.shape[1]

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_classes(self) -> int:
        return self.w_e.shape[0]

    def tensors(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.w_x, layer.w_h, layer.b))
        out.extend((self.w_e, self.b_e))
        return out

    def zeros_like(self) -> "LSTMParams":
        return LSTMParams([LSTMLayer(np.zeros_like(l.w_x), np.zeros_like(l.w_h), np.zeros_like(l.b))
                           for l in self.layers], np.zeros_like(self.w_e), np.zeros_like(self.b_e))

    def copy(self) -> "LSTMParams":
        return LSTMParams([LSTMLayer(l.w_x.copy(), l.w_h.copy(), l.b.copy()) for l in self.layers],
                          self.w_e.copy(), self.b_e.copy())

    def zero_state(self, batch: Optional[int] = None):
        shape = (self.num_layers, self.hidden_dim) if batch is None else \
            (self.num_layers, batch, self.hidden_dim)
        return np.zeros(shape), np.zeros(shape)


def init_lstm(input_dim: int, hidden_dim: int, num_layers: int, num_classes: int,
              rng: np.random.Generator) -> LSTMParams:
    layers = []
    for k in range(num_layers):
        fan_in = (input_dim if k == 0 else hidden_dim)
        bx = 1.0 / np.sqrt(fan_in)
        bh = 1.0 / np.sqrt(hidden_dim)
        b = np.zeros(4 * hidden_dim)
        b[hidden_dim:2 * hidden_dim] = FORGET_BIAS
        layers.append(LSTMLayer(rng.uniform(-bx, bx, (4 * hidden_dim, fan_in)),
                                rng.uniform(-bh, bh, (4 * hidden_dim, hidden_dim)), b))
    be = 1.0 / np.sqrt(hidden_dim)
    return LSTMParams(layers, rng.uniform(-be, be, (num_classes, hidden_dim)), np.zeros(num_classes))


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _check_finite(z: np.ndarray, layer: int, hidden: int):
    if np.isfinite(z).all():
        return
    for g, name in enumerate(GATES):
        if not np.isfinite(z[..., g * hidden:(g + 1) * hidden]).all():
            raise NumericError(f"non-finite pre-activation in layer {layer} {name} gate")
    raise NumericError(f"non-finite pre-activation in layer {layer}")


def lstm_step(params: LSTMParams, x, S_prev, h_prev):
    """One recurrent update through every layer.

    ``x`` is (D,) or (B, D); states are (L, H) or (L, B, H). Returns new
    ``(S, h)`` with the same layout as the inputs.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    S_prev = np.asarray(S_prev, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    if single:
        x, S_prev, h_prev = x[None], S_prev[:, None], h_prev[:, None]
    H, L = params.hidden_dim, params.num_layers
    if x.shape[-1] != params.input_dim:
        raise ConfigurationError(f"observation dim {x.shape[-1]} != LSTM input_dim {params.input_dim}")
    if S_prev.shape != (L, x.shape[0], H) or h_prev.shape != S_prev.shape:
        raise ConfigurationError(f"state shape {S_prev.shape} does not match ({L}, {x.shape[0]}, {H})")
    S_out = np.empty_like(S_prev)
    h_out = np.empty_like(h_prev)
    inp = x
    for k, layer in enumerate(params.layers):
        z = inp @ layer.w_x.T + h_prev[k] @ layer.w_h.T + layer.b
        _check_finite(z, k, H)
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H:2 * H])
        o = _sigmoid(z[:, 2 * H:3 * H])
        g = np.tanh(z[:, 3 * H:])
        S = f * S_prev[k] + i * g
        h = o * np.tanh(S)
        S_out[k], h_out[k] = S, h
        inp = h
    if single:
        return S_out[:, 0], h_out[:, 0]
    return S_out, h_out


def decode(params: LSTMParams, h_top: np.ndarray) -> np.ndarray:
    """Class probabilities from the top-layer hidden state."""
    return softmax(h_top @ params.w_e.T + params.b_e)


@dataclass
class SequenceCache:
    """Everything :func:`bptt_backward` needs from a forward pass."""
    xs: np.ndarray  # (T, B, D)
    resets: np.ndarray  # (T, B) bool: state zeroed before step t
    S_prev: np.ndarray  # (T, L, B, H) state entering step t (after reset)
    h_prev: np.ndarray
    gates: np.ndarray  # (T, L, B, 4H) post-nonlinearity i, f, o, g
    S: np.ndarray  # (T, L, B, H)
    tanh_S: np.ndarray
    h: np.ndarray
    logits: np.ndarray  # (T, B, C)
    probs: np.ndarray


def lstm_forward_sequence(params: LSTMParams, xs: np.ndarray, resets: Optional[np.ndarray] = None,
                          state0=None) -> SequenceCache:
    """Run ``T`` steps for a batch and cache activations.

    ``resets[t, b]`` zeroes the incoming state of sequence ``b`` before step
    ``t``; a zeroed state is a constant, so no gradient crosses it.
    """
    xs = np.asarray(xs, dtype=np.float64)
    T, B, D = xs.shape
    if D != params.input_dim:
        raise ConfigurationError(f"observation dim {D} != LSTM input_dim {params.input_dim}")
    H, L = params.hidden_dim, params.num_layers
    resets = np.zeros((T, B), dtype=bool) if resets is None else np.asarray(resets, dtype=bool)
    if state0 is None:
        S_run, h_run = np.zeros((L, B, H)), np.zeros((L, B, H))
    else:
        S_run, h_run = (np.array(a, dtype=np.float64) for a in state0)
    S_prev = np.empty((T, L, B, H))
    h_prev = np.empty((T, L, B, H))
    gates = np.empty((T, L, B, 4 * H))
    S_all = np.empty((T, L, B, H))
    tanh_all = np.empty((T, L, B, H))
    h_all = np.empty((T, L, B, H))
    for t in range(T):
        if resets[t].any():
            keep = ~resets[t]
            S_run = S_run * keep[None, :, None]
            h_run = h_run * keep[None, :, None]
        S_prev[t], h_prev[t] = S_run, h_run
        inp = xs[t]
        for k, layer in enumerate(params.layers):
            z = inp @ layer.w_x.T + h_run[k] @ layer.w_h.T + layer.b
            _check_finite(z, k, H)
            a = gates[t, k]
            a[:, :3 * H] = _sigmoid(z[:, :3 * H])
            a[:, 3 * H:] = np.tanh(z[:, 3 * H:])
            S = a[:, H:2 * H] * S_run[k] + a[:, :H] * a[:, 3 * H:]
            tS = np.tanh(S)
            S_all[t, k], tanh_all[t, k] = S, tS
            h_all[t, k] = a[:, 2 * H:3 * H] * tS
            inp = h_all[t, k]
        S_run, h_run = S_all[t], h_all[t]
    logits = h_all[:, -1] @ params.w_e.T + params.b_e
    return SequenceCache(xs, resets, S_prev, h_prev, gates, S_all, tanh_all, h_all,
                         logits, softmax(logits))


def bptt_backward(params: LSTMParams, cache: SequenceCache, dlogits: np.ndarray,
                  truncation: int, return_input_grad: bool = False):
    """Gradients of the summed per-step losses w.r.t. every parameter.

    ``dlogits`` (T, B, C) holds dLoss/dlogits for each step. Gradient flow
    into the past is cut every ``truncation`` steps (chunked truncation:
    chunk boundaries at t = truncation, 2*truncation, ...), and at every
    reset. Returns an :class:`LSTMParams` of gradients, and the input
    gradients (T, B, D) when requested.
    """
    if cache is None:
        raise ArgumentError("bptt_backward needs the forward cache")
    if truncation < 1:
        raise ArgumentError("truncation length must be >= 1")
    T, B, _ = cache.xs.shape
    if dlogits.shape[:2] != (T, B):
        raise ArgumentError(f"loss gradients {dlogits.shape} do not cover cached steps ({T}, {B})")
    H, L = params.hidden_dim, params.num_layers
    grads = params.zeros_like()
    dlogits = np.asarray(dlogits, dtype=np.float64)
    h_top = cache.h[:, -1]
    grads.w_e += np.einsum("tbc,tbh->ch", dlogits, h_top)
    grads.b_e += dlogits.sum(axis=(0, 1))
    dh_out = dlogits @ params.w_e  # (T, B, H) gradient into top-layer h
    dxs = np.zeros_like(cache.xs) if return_input_grad else None
    dS_next = np.zeros((L, B, H))
    dh_next = np.zeros((L, B, H))
    for t in range(T - 1, -1, -1):
        dh_below = None
        for k in range(L - 1, -1, -1):
            layer = params.layers[k]
            dh = dh_next[k].copy()
            if k == L - 1:
                dh += dh_out[t]
            else:
                dh += dh_below
            a = cache.gates[t, k]
            i, f, o, g = a[:, :H], a[:, H:2 * H], a[:, 2 * H:3 * H], a[:, 3 * H:]
            tS = cache.tanh_S[t, k]
            dS = dS_next[k] + dh * o * (1.0 - tS * tS)
            dz = np.empty((B, 4 * H))
            dz[:, :H] = dS * g * i * (1.0 - i)
            dz[:, H:2 * H] = dS * cache.S_prev[t, k] * f * (1.0 - f)
            dz[:, 2 * H:3 * H] = dh * tS * o * (1.0 - o)
            dz[:, 3 * H:] = dS * i * (1.0 - g * g)
            inp = cache.xs[t] if k == 0 else cache.h[t, k - 1]
            grad = grads.layers[k]
            grad.w_x += dz.T @ inp
            grad.w_h += dz.T @ cache.h_prev[t, k]
            grad.b += dz.sum(axis=0)
            dS_next[k] = dS * f
            dh_next[k] = dz @ layer.w_h
            if k > 0:
                dh_below = dz @ layer.w_x
            elif return_input_grad:
                dxs[t] = dz @ layer.w_x
        cut = cache.resets[t]
        if t % truncation == 0:
            dS_next[:] = 0.0
            dh_next[:] = 0.0
        elif cut.any():
            keep = ~cut
            dS_next *= keep[None, :, None]
            dh_next *= keep[None, :, None]
    if return_input_grad:
        return grads, dxs
    return grads
