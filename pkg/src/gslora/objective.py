"""Forgetting objective: bounded forget loss, replay retention, group sparsity."""

from __future__ import annotations

from dataclasses import dataclass
import math

from . import autodiff as ad
from .autodiff import Tensor
from .lora import LoraSet, group_norm

PROX_MODES = ("proximal", "subgradient")


@dataclass(frozen=True)
class ObjectiveConfig:
    bnd: float
    beta: float = 0.15
    alpha_k: float = 20.0
    warmup_epochs: int = 20
    prox_mode: str = "proximal"

    def __post_init__(self):
        if not self.bnd > 0:
            raise ValueError(f"BND must be > 0, got {self.bnd}")
        if self.beta < 0 or self.alpha_k < 0 or self.warmup_epochs < 0:
            raise ValueError("beta, alpha_k and warmup_epochs must be >= 0")
        if self.prox_mode not in PROX_MODES:
            raise ValueError(f"prox_mode must be one of {PROX_MODES}, got {self.prox_mode!r}")


def default_bnd(num_classes: int) -> float:
    """Four times the cross-entropy of a uniform guess."""
    return 4.0 * math.log(num_classes)


def structure_loss(lora: LoraSet) -> Tensor:
    """Differentiable sum over groups of per-matrix Frobenius norms."""
    total = Tensor(0.0)
    for g in lora.groups:
        for m in g.matrices:
            total = ad.add(total, ad.frobenius_norm(m))
    return total


def forget_loss(logits_f: Tensor, labels_f, bnd: float) -> Tensor:
    """``relu(BND - CE)``: raises forgotten-class CE until it hits the bound."""
    if logits_f.shape[0] == 0:
        raise ValueError("empty forget batch")
    ce = ad.softmax_cross_entropy(logits_f, labels_f)
    return ad.relu(ad.sub(Tensor(float(bnd)), ce))


def retain_loss(logits_r: Tensor, labels_r) -> Tensor:
    if logits_r.shape[0] == 0:
        raise ValueError("empty replay batch")
    return ad.softmax_cross_entropy(logits_r, labels_r)


def data_loss(retain, forget, beta: float):
    return ad.add(retain, ad.scale(ad.as_tensor(forget), beta))


def total_loss(data, structure, alpha: float):
    if alpha == 0.0:
        return ad.as_tensor(data)
    return ad.add(data, ad.scale(ad.as_tensor(structure), alpha))


def alpha_schedule(epoch: int, warmup_epochs: int, alpha_k: float) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return 0.0 if epoch < warmup_epochs else float(alpha_k)


def prox_group_step(lora: LoraSet, lam: float, optimizer=None) -> list:
    """Group soft-threshold: scale each group by ``max(0, 1 - lam / norm)``.

    Groups with norm <= lam become exactly zero; if ``optimizer`` is given their
    moment estimates are cleared so momentum cannot revive them. Returns the
    names of groups zeroed by this call.
    """
    if lam < 0:
        raise ValueError("shrink amount must be >= 0")
    if lam == 0:
        return []
    zeroed = []
    for g in lora.groups:
        n = group_norm(g)
        if n == 0.0:
            continue
        if n <= lam:
            for m in g.matrices:
                m.data[...] = 0.0
            zeroed.append(g.name)
            if optimizer is not None:
                _clear_moments(optimizer, g.matrices)
        else:
            factor = 1.0 - lam / n
            for m in g.matrices:
                m.data *= factor
    return zeroed


def _clear_moments(optimizer, tensors) -> None:
    ids = {id(t) for t in tensors}
    for p, m, v in zip(optimizer.params, optimizer.m, optimizer.v):
        if id(p) in ids:
            m[...] = 0.0
            v[...] = 0.0
