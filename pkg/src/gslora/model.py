"""Small pre-LayerNorm transformer classifier over fixed-length vector sequences."""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .optim import AdamW, OptimizerConfig
from .rng import stream

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


@dataclass(frozen=True)
class ModelConfig:
    num_blocks: int = 4
    model_dim: int = 256
    num_heads: int = 4
    ffn_hidden_dim: int = 128
    seq_len: int = 4
    input_dim: int = 16
    num_classes: int = 10
    dropout: float = 0.1
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("num_blocks", "model_dim", "num_heads", "ffn_hidden_dim", "seq_len", "input_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


@dataclass
class FfnParams:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor


@dataclass
class Block:
    ln1_g: Tensor
    ln1_b: Tensor
    Wq: Tensor
    bq: Tensor
    Wk: Tensor
    bk: Tensor
    Wv: Tensor
    bv: Tensor
    Wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    ffn: FfnParams


@dataclass
class TransformerClassifier:
    config: ModelConfig
    w_in: Tensor
    b_in: Tensor
    pos: Tensor
    blocks: list
    lnf_g: Tensor
    lnf_b: Tensor
    head_w: Tensor
    head_b: Tensor
    meta: dict = field(default_factory=dict)

    def named_parameters(self) -> dict:
        out = {"embed.w_in": self.w_in, "embed.b_in": self.b_in, "embed.pos": self.pos}
        for i, blk in enumerate(self.blocks):
            p = f"blocks.{i}."
            for name in ("ln1_g", "ln1_b", "Wq", "bq", "Wk", "bk", "Wv", "bv", "Wo", "bo", "ln2_g", "ln2_b"):
                out[p + name] = getattr(blk, name)
            for name in ("W1", "b1", "W2", "b2"):
                out[p + "ffn." + name] = getattr(blk.ffn, name)
        out["final.ln_g"] = self.lnf_g
        out["final.ln_b"] = self.lnf_b
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def set_trainable(self, flag: bool, head: Optional[bool] = None) -> None:
        for name, p in self.named_parameters().items():
            p.requires_grad = flag if not name.startswith("head.") or head is None else head
            p.grad = None

    def backbone_parameters(self) -> list:
        return [p for n, p in self.named_parameters().items() if not n.startswith("head.")]

    def head_parameters(self) -> list:
        return [self.head_w, self.head_b]

    def copy(self) -> "TransformerClassifier":
        return from_named_arrays(self.config, {k: v.data.copy() for k, v in self.named_parameters().items()}, dict(self.meta))

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, p in self.named_parameters().items():
            h.update(name.encode())
            h.update(p.data.tobytes())
        return h.hexdigest()


def _param(rng, shape, std) -> Tensor:
    return Tensor(rng.standard_normal(shape) * std)


def init_model(config: ModelConfig, seed: int) -> TransformerClassifier:
    rng = stream(seed, "init")
    d, k = config.model_dim, config.ffn_hidden_dim
    std = 0.02
    blocks = []
    for _ in range(config.num_blocks):
        blocks.append(
            Block(
                ln1_g=Tensor(np.ones(d)), ln1_b=Tensor(np.zeros(d)),
                Wq=_param(rng, (d, d), std), bq=Tensor(np.zeros(d)),
                Wk=_param(rng, (d, d), std), bk=Tensor(np.zeros(d)),
                Wv=_param(rng, (d, d), std), bv=Tensor(np.zeros(d)),
                Wo=_param(rng, (d, d), std / math.sqrt(2 * config.num_blocks)), bo=Tensor(np.zeros(d)),
                ln2_g=Tensor(np.ones(d)), ln2_b=Tensor(np.zeros(d)),
                ffn=FfnParams(
                    W1=_param(rng, (d, k), std), b1=Tensor(np.zeros(k)),
                    W2=_param(rng, (k, d), std / math.sqrt(2 * config.num_blocks)), b2=Tensor(np.zeros(d)),
                ),
            )
        )
    return TransformerClassifier(
        config=config,
        w_in=_param(rng, (config.input_dim, d), 1.0 / math.sqrt(config.input_dim)),
        b_in=Tensor(np.zeros(d)),
        pos=_param(rng, (config.seq_len, d), std),
        blocks=blocks,
        lnf_g=Tensor(np.ones(d)),
        lnf_b=Tensor(np.zeros(d)),
        head_w=_param(rng, (d, config.num_classes), std),
        head_b=Tensor(np.zeros(config.num_classes)),
    )


def from_named_arrays(config: ModelConfig, arrays: dict, meta: Optional[dict] = None) -> TransformerClassifier:
    """Rebuild a model from ``named_parameters``-style arrays (shape-checked)."""
    template = init_model(config, seed=0)
    named = template.named_parameters()
    missing = set(named) - set(arrays)
    if missing:
        raise ValueError(f"missing parameters: {sorted(missing)[:5]}")
    for name, t in named.items():
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != t.shape:
            raise ValueError(f"parameter {name}: expected shape {t.shape}, got {arr.shape}")
        t.data = np.ascontiguousarray(arr.copy())
    template.meta = dict(meta or {})
    return template


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def ffn_forward(x: Tensor, p: FfnParams, deltas=None) -> Tensor:
    """``relu(x W1 + b1) W2 + b2`` with ``W1``/``W2`` optionally replaced by
    ``W + delta`` for each non-None entry of ``deltas``."""
    d = p.W1.shape[0]
    if x.shape[-1] != d:
        raise ad.ShapeError(f"ffn input last dim {x.shape[-1]} != model_dim {d}")
    w1, w2 = p.W1, p.W2
    if deltas is not None:
        d1, d2 = deltas
        if d1 is not None:
            w1 = ad.add(w1, d1)
        if d2 is not None:
            w2 = ad.add(w2, d2)
    h = ad.relu(ad.add(ad.matmul(x, w1), p.b1))
    return ad.add(ad.matmul(h, w2), p.b2)


def _dropout(x: Tensor, rate: float, rng) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, Tensor(mask))


def _attention(x: Tensor, blk: Block, num_heads: int) -> Tensor:
    b, s, d = x.shape
    dh = d // num_heads

    def heads(w, bias):
        t = ad.add(ad.matmul(x, w), bias)
        return ad.transpose(ad.reshape(t, (b, s, num_heads, dh)), (0, 2, 1, 3))

    q, k, v = heads(blk.Wq, blk.bq), heads(blk.Wk, blk.bk), heads(blk.Wv, blk.bv)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    ctx = ad.matmul(ad.softmax(scores), v)
    merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, s, d))
    return ad.add(ad.matmul(merged, blk.Wo), blk.bo)


def features(model: TransformerClassifier, x, lora=None, dropout_rng=None) -> Tensor:
    """Pooled final-LayerNorm representation, the input to the head."""
    cfg = model.config
    x = ad.as_tensor(x)
    if x.ndim != 3 or x.shape[1:] != (cfg.seq_len, cfg.input_dim):
        raise ValueError(f"batch shape {x.shape} does not match [batch, {cfg.seq_len}, {cfg.input_dim}]")
    rate = cfg.dropout if dropout_rng is not None else 0.0
    h = ad.add(ad.add(ad.matmul(x, model.w_in), model.b_in), model.pos)
    for i, blk in enumerate(model.blocks):
        a = _attention(ad.layer_norm(h, blk.ln1_g, blk.ln1_b, cfg.ln_eps), blk, cfg.num_heads)
        h = ad.add(h, _dropout(a, rate, dropout_rng))
        deltas = lora.ffn_deltas(i) if lora is not None else None
        f = ffn_forward(ad.layer_norm(h, blk.ln2_g, blk.ln2_b, cfg.ln_eps), blk.ffn, deltas)
        h = ad.add(h, _dropout(f, rate, dropout_rng))
    h = ad.layer_norm(h, model.lnf_g, model.lnf_b, cfg.ln_eps)
    return ad.mean(h, axis=1)


def head(model: TransformerClassifier, feats: Tensor) -> Tensor:
    return ad.add(ad.matmul(feats, model.head_w), model.head_b)


def forward(model: TransformerClassifier, x, lora=None, dropout_rng=None) -> Tensor:
    """Logits ``[batch, num_classes]``; dropout only when ``dropout_rng`` is given."""
    return head(model, features(model, x, lora, dropout_rng))


def predict(model: TransformerClassifier, x, lora=None, batch_size: int = 256) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(x.shape[0], dtype=np.int64)
    for start in range(0, x.shape[0], batch_size):
        logits = forward(model, x[start:start + batch_size], lora).data
        out[start:start + batch_size] = np.argmax(logits, axis=1)
    return out


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------


def train_epochs(model, dataset: Dataset, params, opt_cfg: OptimizerConfig, epochs: int, seed: int,
                 loss_fn=None, lora=None, dropout: bool = False, tag: str = "train", stream_id: int = 0):
    """Minibatch AdamW over ``dataset`` updating ``params``; returns per-epoch mean losses."""
    n = len(dataset)
    steps_per_epoch = max(1, math.ceil(n / opt_cfg.batch_size))
    opt = AdamW(params, opt_cfg, total_steps=epochs * steps_per_epoch)
    sampler = stream(seed, "sampling", stream_id)
    drop_rng = stream(seed, "dropout", stream_id) if dropout else None
    history = []
    for epoch in range(epochs):
        order = sampler.permutation(n)
        total = 0.0
        for s in range(steps_per_epoch):
            idx = order[s * opt_cfg.batch_size:(s + 1) * opt_cfg.batch_size]
            logits = forward(model, dataset.x[idx], lora, drop_rng)
            loss = ad.softmax_cross_entropy(logits, dataset.y[idx]) if loss_fn is None else loss_fn(logits, dataset.y[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"{tag}: non-finite loss at epoch {epoch}")
            ad.backward(loss, params=params)
            opt.step()
            total += value * len(idx)
        history.append(total / n)
        logger.debug("%s epoch %d loss %.5f", tag, epoch, history[-1])
    return history


def pretrain(config: ModelConfig, dataset: Dataset, opt: OptimizerConfig, epochs: int, seed: int) -> TransformerClassifier:
    """Train every parameter from a seeded init; deterministic given ``seed``."""
    if dataset.classes() != list(range(config.num_classes)):
        raise ValueError(f"dataset must cover classes 0..{config.num_classes - 1}, has {dataset.classes()}")
    model = init_model(config, seed)
    model.set_trainable(True)
    train_epochs(model, dataset, model.parameters(), opt, epochs, seed, dropout=config.dropout > 0, tag="pretrain")
    model.set_trainable(False)
    return model
