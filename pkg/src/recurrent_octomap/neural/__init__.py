"""Minimal dense neural kernel: MLPs, a stacked LSTM with truncated BPTT,
softmax/NLL, and SGD-family optimizers. Everything runs on numpy float64."""
from .losses import PROB_FLOOR, batch_nll, nll_loss, softmax
from .lstm import (LSTMLayer, LSTMParams, SequenceCache, bptt_backward, decode, init_lstm,
                   lstm_forward_sequence, lstm_step)
from .mlp import Dense, MLPCache, MLPParams, init_mlp, mlp_backward, mlp_forward, mlp_hidden
from .optim import OptimizerState, global_norm, optimizer_step

__all__ = [
    "PROB_FLOOR", "softmax", "nll_loss", "batch_nll",
    "LSTMLayer", "LSTMParams", "SequenceCache", "init_lstm", "lstm_step", "decode",
    "lstm_forward_sequence", "bptt_backward",
    "Dense", "MLPParams", "MLPCache", "init_mlp", "mlp_forward", "mlp_backward", "mlp_hidden",
    "OptimizerState", "optimizer_step", "global_norm",
]
