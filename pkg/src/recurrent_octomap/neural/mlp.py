"""Dense multi-layer perceptron with hand-derived backward pass."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from ..errors import ConfigurationError

ACTIVATIONS = ("relu", "identity")


@dataclass
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ConfigurationError(
                f"dense layer weight {self.weight.shape} and bias {self.bias.shape} disagree")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass
class MLPParams:
    layers: List[Dense] = field(default_factory=list)

    def __post_init__(self):
        for k in range(1, len(self.layers)):
            if self.layers[k].in_dim != self.layers[k - 1].out_dim:
                raise ConfigurationError(
                    f"layer {k} expects {self.layers[k].in_dim} inputs but layer {k - 1} "
                    f"produces {self.layers[k - 1].out_dim}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def sizes(self) -> List[int]:
        return [self.in_dim] + [layer.out_dim for layer in self.layers]

    def tensors(self) -> List[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def zeros_like(self) -> "MLPParams":
        return MLPParams([Dense(np.zeros_like(l.weight), np.zeros_like(l.bias), l.activation)
                          for l in self.layers])

    def copy(self) -> "MLPParams":
        return MLPParams([Dense(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers])


def init_mlp(sizes: Sequence[int], rng: np.random.Generator,
             final_activation: str = "relu") -> MLPParams:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases; relu on hidden layers."""
    if len(sizes) < 2:
        raise ConfigurationError("an MLP needs at least an input and an output size")
    layers = []
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(n_in)
        act = final_activation if k == len(sizes) - 2 else "relu"
        layers.append(Dense(rng.uniform(-bound, bound, size=(n_out, n_in)), np.zeros(n_out), act))
    return MLPParams(layers)


@dataclass
class MLPCache:
    inputs: List[np.ndarray]  # input to each layer
    pre: List[np.ndarray]  # pre-activations


def mlp_forward(params: MLPParams, x: np.ndarray, return_cache: bool = False):
    """Apply the MLP row-wise to ``x`` of shape (N, in_dim).

    With ``return_cache`` the per-layer inputs and pre-activations are kept for
    :func:`mlp_backward` and ``(out, cache)`` is returned.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != params.in_dim:
        raise ConfigurationError(f"input has {x.shape[1]} columns, MLP expects {params.in_dim}")
    inputs, pres = [], []
    a = x
    for layer in params.layers:
        inputs.append(a)
        z = a @ layer.weight.T + layer.bias
        pres.append(z)
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
    if return_cache:
        return a, MLPCache(inputs, pres)
    return a


def mlp_hidden(params: MLPParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (penultimate activation, final output) for a batch of rows."""
    out, cache = mlp_forward(params, x, return_cache=True)
    return cache.inputs[-1], out


def mlp_backward(params: MLPParams, cache: MLPCache, grad_out: np.ndarray,
                 need_input_grad: bool = True) -> tuple[MLPParams, Optional[np.ndarray]]:
    grads = []
    g = np.asarray(grad_out, dtype=np.float64)
    for k in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[k]
        if layer.activation == "relu":
            g = g * (cache.pre[k] > 0)
        dw = g.T @ cache.inputs[k]
        db = g.sum(axis=0)
        grads.append(Dense(dw, db, layer.activation))
        if k > 0 or need_input_grad:
            g = g @ layer.weight
    grads.reverse()
    return MLPParams(grads), (g if need_input_grad else None)
