"""Gradient-descent optimizers with per-epoch exponential learning-rate decay."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from ..errors import ArgumentError, ConfigurationError

KINDS = ("sgd", "momentum", "adam")


@dataclass
class OptimizerState:
    base_lr: float = 0.005
    decay: float = 0.95
    epoch: int = 0
    kind: str = "sgd"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: Optional[float] = None
    steps: int = 0
    accumulators: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"optimizer kind must be one of {KINDS}, got {self.kind!r}")
        if self.base_lr <= 0 or self.decay <= 0:
            raise ConfigurationError("learning rate and decay must be positive")

    @property
    def lr(self) -> float:
        return self.base_lr * self.decay ** self.epoch

    def end_epoch(self):
        self.epoch += 1


def _tensors(obj):
    return obj.tensors() if hasattr(obj, "tensors") else list(obj)


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.vdot(g, g)) for g in _tensors(grads))))


def optimizer_step(opt: OptimizerState, params, grads):
    """Update ``params`` in place from ``grads`` and return them.

    ``params``/``grads`` are parameter containers exposing ``tensors()`` (or
    plain lists of arrays) with matching shapes.
    """
    ps, gs = _tensors(params), _tensors(grads)
    if len(ps) != len(gs) or any(p.shape != g.shape for p, g in zip(ps, gs)):
        raise ArgumentError("gradient shapes do not match parameter shapes")
    scale = 1.0
    if opt.clip_norm is not None:
        norm = global_norm(gs)
        if norm > opt.clip_norm:
            scale = opt.clip_norm / norm
    lr = opt.lr
    opt.steps += 1
    if opt.kind == "sgd":
        for p, g in zip(ps, gs):
            p -= lr * (scale * g)
        return params
    if not opt.accumulators:
        n = 1 if opt.kind == "momentum" else 2
        opt.accumulators = [np.zeros_like(p) for p in ps for _ in range(n)]
    if opt.kind == "momentum":
        for p, g, v in zip(ps, gs, opt.accumulators):
            v *= opt.momentum
            v += scale * g
            p -= lr * v
        return params
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.steps
    c2 = 1.0 - b2 ** opt.steps
    for j, (p, g) in enumerate(zip(ps, gs)):
        m, v = opt.accumulators[2 * j], opt.accumulators[2 * j + 1]
        g = scale * g
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return params
