"""AdamW with a per-step cosine learning-rate decay."""

from dataclasses import dataclass
import math

import numpy as np


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-2
    min_lr: float = 1e-5
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16

    def __post_init__(self):
        if self.lr <= 0 or self.min_lr < 0 or self.min_lr > self.lr:
            raise ValueError(f"need 0 <= min_lr <= lr and lr > 0, got lr={self.lr} min_lr={self.min_lr}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def cosine_lr(step: int, total_steps: int, lr: float, min_lr: float) -> float:
    if total_steps <= 1:
        return lr
    frac = min(step, total_steps - 1) / (total_steps - 1)
    return min_lr + 0.5 * (lr - min_lr) * (1.0 + math.cos(math.pi * frac))


class AdamW:
    """Decoupled weight decay Adam over a fixed list of tensors."""

    def __init__(self, params, cfg: OptimizerConfig, total_steps: int):
        self.params = list(params)
        self.cfg = cfg
        self.total_steps = max(int(total_steps), 1)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def lr(self) -> float:
        """Learning rate the next ``step`` will use."""
        return cosine_lr(self.t, self.total_steps, self.cfg.lr, self.cfg.min_lr)

    def step(self) -> float:
        cfg = self.cfg
        lr = self.lr
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            if cfg.weight_decay:
                p.data *= 1.0 - lr * cfg.weight_decay
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        return lr
