"""Low-rank adapters on the FFN weights, grouped for group-sparse selection.

Effective FFN weights are ``base + (history + B @ A)``. ``history`` holds the
sum of all merged task deltas. The parenthesisation is fixed on purpose: merge
folds the exact same ``B @ A`` product into ``history``, and a freshly attached
pair contributes an exact zero, so the model function is bit-identical across
merge and re-attach.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import stream

A_INIT_STD = 0.02
TARGETS = ("W1", "W2")


class GroupingStrategy(str, Enum):
    BLOCK = "block"
    MODULE = "module"
    MATRIX = "matrix"


@dataclass
class LoraPair:
    A: Tensor  # [r, k]
    B: Tensor  # [d, r]
    block: int
    weight: str

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def target(self) -> tuple:
        return (self.block, self.weight)

    def delta(self) -> np.ndarray:
        return np.matmul(self.B.data, self.A.data)


@dataclass
class LoraGroup:
    name: str
    matrices: list  # Tensors penalised together

    def norm(self) -> float:
        return group_norm(self)


@dataclass
class LoraSet:
    rank: int
    strategy: GroupingStrategy
    pairs: dict  # (block, "W1"/"W2") -> LoraPair; empty between merge and attach
    history: dict  # (block, "W1"/"W2") -> ndarray of merged deltas
    groups: list = field(default_factory=list)
    tasks_merged: int = 0

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    def parameters(self) -> list:
        out = []
        for key in sorted(self.pairs):
            out.extend((self.pairs[key].B, self.pairs[key].A))
        return out

    def num_trainable(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def delta(self, target) -> Tensor:
        target = tuple(target)
        if target not in self.history:
            raise KeyError(f"unknown LoRA target {target}")
        hist = Tensor(self.history[target])
        pair = self.pairs.get(target)
        if pair is None:
            return hist
        return ad.add(hist, ad.matmul(pair.B, pair.A))

    def ffn_deltas(self, block: int) -> tuple:
        return self.delta((block, "W1")), self.delta((block, "W2"))


def _make_groups(pairs: dict, strategy: GroupingStrategy) -> list:
    blocks = sorted({b for b, _ in pairs})
    groups = []
    for b in blocks:
        p1, p2 = pairs[(b, "W1")], pairs[(b, "W2")]
        if strategy is GroupingStrategy.BLOCK:
            groups.append(LoraGroup(f"block{b}", [p1.B, p1.A, p2.B, p2.A]))
        elif strategy is GroupingStrategy.MODULE:
            groups.append(LoraGroup(f"block{b}.W1", [p1.B, p1.A]))
            groups.append(LoraGroup(f"block{b}.W2", [p2.B, p2.A]))
        else:
            for w, p in (("W1", p1), ("W2", p2)):
                groups.append(LoraGroup(f"block{b}.{w}.B", [p.B]))
                groups.append(LoraGroup(f"block{b}.{w}.A", [p.A]))
    return groups


def _target_shapes(model) -> dict:
    shapes = {}
    for i, blk in enumerate(model.blocks):
        shapes[(i, "W1")] = blk.ffn.W1.shape
        shapes[(i, "W2")] = blk.ffn.W2.shape
    return shapes


def attach(model, rank: int, grouping="block", seed: int = 0, history: Optional[dict] = None,
           task: int = 0) -> LoraSet:
    """Fresh trainable pairs on every FFN weight: ``A ~ N(0, 0.02)``, ``B = 0``.

    ``history`` (merged deltas of earlier tasks) is carried over unchanged.
    """
    strategy = GroupingStrategy(grouping)
    shapes = _target_shapes(model)
    smallest = min(min(s) for s in shapes.values())
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    if rank >= smallest:
        raise ValueError(f"rank {rank} is not low-rank for weights with min dim {smallest}")
    rng = stream(seed, "lora", task)
    pairs = {}
    for key in sorted(shapes):
        d, k = shapes[key]
        pairs[key] = LoraPair(
            A=Tensor(rng.standard_normal((rank, k)) * A_INIT_STD, requires_grad=True, name=f"lora.{key[0]}.{key[1]}.A"),
            B=Tensor(np.zeros((d, rank)), requires_grad=True, name=f"lora.{key[0]}.{key[1]}.B"),
            block=key[0],
            weight=key[1],
        )
    if history is None:
        history = {key: np.zeros(shape) for key, shape in shapes.items()}
    else:
        history = {key: np.array(history[key], copy=True) for key in shapes}
    return LoraSet(rank=rank, strategy=strategy, pairs=pairs, history=history,
                   groups=_make_groups(pairs, strategy))


def effective_weight(base: Tensor, lora: LoraSet, target) -> Tensor:
    return ad.add(base, lora.delta(target))


def merge(lora: LoraSet) -> LoraSet:
    """Fold the current pairs into ``history`` and drop them."""
    history = {key: arr.copy() for key, arr in lora.history.items()}
    for key, pair in lora.pairs.items():
        history[key] = history[key] + pair.delta()
    return LoraSet(rank=lora.rank, strategy=lora.strategy, pairs={}, history=history, groups=[],
                   tasks_merged=lora.tasks_merged + 1)


def group_norm(group: LoraGroup) -> float:
    """Sum of Frobenius norms of the group's matrices."""
    return float(sum(np.sqrt(np.sum(m.data * m.data)) for m in group.matrices))


def zero_group_ratio(lora: LoraSet, eps: float = 1e-8) -> float:
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if not lora.groups:
        return 0.0
    zero = sum(1 for g in lora.groups if group_norm(g) <= eps)
    return zero / len(lora.groups)
