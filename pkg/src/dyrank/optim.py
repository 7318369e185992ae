from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .tensor import Tensor


@dataclass
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.weight_decay < 0 or not self.eps > 0:
            raise ValueError("weight_decay must be >= 0 and eps > 0")


class AdamW:
    """Adam with decoupled weight decay.

    ``decay`` lists the tensors that receive weight decay; others only take
    the adaptive gradient step.
    """

    def __init__(self, params: Iterable[Tensor], cfg: OptimConfig,
                 decay: Iterable[Tensor] | None = None):
        self.params = list(params)
        self.cfg = cfg
        decay_ids = {id(p) for p in (self.params if decay is None else decay)}
        self.decay = [id(p) in decay_ids for p in self.params]
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g
            data = p.data
            if self.decay[i] and c.weight_decay:
                data = data * (1.0 - c.lr * c.weight_decay)
            p.data = data - c.lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + c.eps)
