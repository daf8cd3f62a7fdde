"""Continual forgetting: task sequencing, replay buffers, baselines, recovery probe."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import logging
import math
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import lora as lora_mod
from . import objective as obj_mod
from .autodiff import Tensor
from .data import Dataset, Splits
from .metrics import MetricsRecord, accuracy, make_record
from .model import TrainingError, TransformerClassifier, features, forward, init_model
from .objective import ObjectiveConfig
from .optim import AdamW, OptimizerConfig
from .rng import stream

logger = logging.getLogger(__name__)

# Head-masking control: masked classes get zero weights and this bias.
HEAD_MASK_BIAS = -10.0


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    grouping: str = "block"


@dataclass(frozen=True)
class ForgettingTask:
    index: int
    forget_classes: tuple
    data_ratio: float = 0.1
    excluded_replay: tuple = ()
    epochs: int = 100
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self):
        object.__setattr__(self, "forget_classes", tuple(sorted(int(c) for c in self.forget_classes)))
        object.__setattr__(self, "excluded_replay", tuple(sorted(int(c) for c in self.excluded_replay)))
        if not self.forget_classes:
            raise ValueError(f"task {self.index}: forget set is empty")
        if len(set(self.forget_classes)) != len(self.forget_classes):
            raise ValueError(f"task {self.index}: duplicate forget classes")
        if not 0.0 < self.data_ratio <= 1.0:
            raise ValueError(f"task {self.index}: data_ratio must lie in (0, 1], got {self.data_ratio}")
        if self.epochs < 0:
            raise ValueError(f"task {self.index}: epochs must be >= 0")


@dataclass
class TaskLog:
    """Extra per-task diagnostics that do not belong in the metrics CSV."""

    task: int
    acc_f_before: float
    replay_size: int
    forget_size: int
    losses: list
    zeroed_groups: list
    group_norms: dict


@dataclass
class EngineState:
    model: TransformerClassifier
    splits: Splits
    lora: lora_mod.LoraSet
    lora_cfg: LoraConfig
    seed: int
    forgotten: list = field(default_factory=list)  # one tuple of class ids per finished task
    records: list = field(default_factory=list)
    logs: list = field(default_factory=list)
    pretrain_fingerprint: str = ""

    @property
    def num_classes(self) -> int:
        return self.model.config.num_classes

    def forgotten_classes(self) -> set:
        return {c for task in self.forgotten for c in task}

    def retained_classes(self) -> list:
        gone = self.forgotten_classes()
        return [c for c in range(self.num_classes) if c not in gone]


def init_state(model: TransformerClassifier, splits: Splits, lora_cfg: LoraConfig = LoraConfig(),
               seed: int = 0) -> EngineState:
    model.set_trainable(False)
    empty = lora_mod.merge(lora_mod.attach(model, lora_cfg.rank, lora_cfg.grouping, seed))
    empty.tasks_merged = 0
    return EngineState(model=model, splits=splits, lora=empty, lora_cfg=lora_cfg, seed=seed,
                       pretrain_fingerprint=model.fingerprint())


# ---------------------------------------------------------------------------
# data selection
# ---------------------------------------------------------------------------


def _per_class_subsample(dataset: Dataset, classes, ratio: float, rng) -> Dataset:
    picks = []
    for c in sorted(classes):
        idx = np.flatnonzero(dataset.y == c)
        if idx.size == 0:
            continue
        k = max(1, int(round(ratio * idx.size)))
        picks.append(np.sort(rng.choice(idx, size=k, replace=False)))
    if not picks:
        return Dataset(np.zeros((0,) + dataset.x.shape[1:]), np.zeros(0, dtype=np.int64))
    return dataset.subset(np.concatenate(picks))


def build_replay_buffer(dataset: Dataset, remaining_classes, data_ratio: float, excluded=(), rng=None) -> Dataset:
    """Uniform per-class subsample of the remaining classes; excluded classes get nothing."""
    remaining = sorted(set(int(c) for c in remaining_classes))
    if not remaining:
        raise ValueError("no remaining classes to replay")
    if not 0.0 < data_ratio <= 1.0:
        raise ValueError(f"data_ratio must lie in (0, 1], got {data_ratio}")
    keep = [c for c in remaining if c not in set(excluded)]
    if not keep:
        logger.warning("every remaining class is excluded; replay buffer is empty")
    rng = np.random.default_rng(0) if rng is None else rng
    if data_ratio == 1.0:
        return dataset.filter_classes(keep) if keep else _per_class_subsample(dataset, [], 1.0, rng)
    return _per_class_subsample(dataset, keep, data_ratio, rng)


def _cycle_batches(n: int, size: int, rng):
    """Endless stream of index batches from reshuffled passes over ``range(n)``."""
    buf = np.zeros(0, dtype=np.int64)
    while True:
        while buf.size < size:
            buf = np.concatenate([buf, rng.permutation(n)])
        out, buf = buf[:size], buf[size:]
        yield out


# ---------------------------------------------------------------------------
# one forgetting task
# ---------------------------------------------------------------------------


def _validate_task(state: EngineState, task: ForgettingTask) -> None:
    c = state.num_classes
    bad = [k for k in task.forget_classes if not 0 <= k < c]
    if bad:
        raise ValueError(f"task {task.index}: classes {bad} outside [0, {c})")
    again = sorted(set(task.forget_classes) & state.forgotten_classes())
    if again:
        raise ValueError(f"task {task.index}: classes {again} were already forgotten")
    if task.index != len(state.forgotten) + 1:
        raise ValueError(f"task index {task.index} out of order; expected {len(state.forgotten) + 1}")


def train_lora(model, lora, replay: Dataset, forget: Dataset, task: ForgettingTask, obj: ObjectiveConfig,
               seed: int) -> tuple:
    """Minimise retain + beta * forget (+ group sparsity) over the current LoRA pairs."""
    params = lora.parameters()
    bs = task.optimizer.batch_size
    has_replay = len(replay) > 0
    steps_per_epoch = max(1, math.ceil((len(replay) if has_replay else len(forget)) / bs))
    opt = AdamW(params, task.optimizer, total_steps=task.epochs * steps_per_epoch)
    sampler = stream(seed, "sampling", task.index)
    zeroed: list = []
    losses: list = []
    for epoch in range(task.epochs):
        alpha = obj_mod.alpha_schedule(epoch, obj.warmup_epochs, obj.alpha_k)
        order = sampler.permutation(len(replay)) if has_replay else None
        forget_batches = _cycle_batches(len(forget), bs, sampler)
        epoch_loss = 0.0
        for s in range(steps_per_epoch):
            if has_replay:
                r_idx = order[s * bs:(s + 1) * bs]
                f_idx = next(forget_batches)[: len(r_idx)]
                x = np.concatenate([replay.x[r_idx], forget.x[f_idx]])
                logits = forward(model, x, lora)
                nr = len(r_idx)
                retain = obj_mod.retain_loss(ad.rows(logits, 0, nr), replay.y[r_idx])
                fl = obj_mod.forget_loss(ad.rows(logits, nr, logits.shape[0]), forget.y[f_idx], obj.bnd)
                data = obj_mod.data_loss(retain, fl, obj.beta)
            else:
                f_idx = next(forget_batches)
                logits = forward(model, forget.x[f_idx], lora)
                data = ad.scale(obj_mod.forget_loss(logits, forget.y[f_idx], obj.bnd), obj.beta)
            if obj.prox_mode == "subgradient":
                loss = obj_mod.total_loss(data, obj_mod.structure_loss(lora), alpha)
            else:
                loss = data
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"task {task.index}: non-finite loss at epoch {epoch}")
            ad.backward(loss, params=params)
            lr = opt.step()
            if obj.prox_mode == "proximal" and alpha > 0:
                for name in obj_mod.prox_group_step(lora, lr * alpha, opt):
                    zeroed.append((epoch, name))
            epoch_loss += value
        losses.append(epoch_loss / steps_per_epoch)
        logger.debug("task %d epoch %d loss %.5f alpha %g", task.index, epoch, losses[-1], alpha)
    return losses, zeroed


def task_report(state: EngineState, task: ForgettingTask, lora, acc_f_before: float) -> MetricsRecord:
    """Metrics for ``task`` evaluated on the test split with ``lora`` applied."""
    if task.index != len(state.forgotten) + 1:
        raise ValueError(f"task_report for task {task.index} out of order")
    test = state.splits.test
    gone = state.forgotten_classes()
    retained = [c for c in range(state.num_classes) if c not in gone and c not in task.forget_classes]
    acc_r = accuracy(state.model, test, retained, lora) if retained else 0.0
    acc_f = accuracy(state.model, test, task.forget_classes, lora)
    acc_o = accuracy(state.model, test, gone, lora) if gone else None
    tunable = lora.num_trainable() / state.model.num_parameters()
    return make_record(task.index, acc_r, acc_f, acc_f_before, acc_o, lora_mod.zero_group_ratio(lora), tunable)


def run_task(state: EngineState, task: ForgettingTask, obj: ObjectiveConfig) -> EngineState:
    """Attach fresh LoRA pairs, train them to forget ``task``, record metrics, merge."""
    _validate_task(state, task)
    model, splits = state.model, state.splits
    fingerprint = model.fingerprint()
    gone = state.forgotten_classes()
    remaining = [c for c in range(state.num_classes) if c not in gone and c not in task.forget_classes]
    rng = stream(state.seed, "sampling", 1000 + task.index)
    replay = (build_replay_buffer(splits.train, remaining, task.data_ratio, task.excluded_replay, rng)
              if remaining else _per_class_subsample(splits.train, [], 1.0, rng))
    forget = _per_class_subsample(splits.train, task.forget_classes, task.data_ratio, rng)
    if len(forget) == 0:
        raise ValueError(f"task {task.index}: no training data for classes {task.forget_classes}")

    acc_f_before = accuracy(model, splits.test, task.forget_classes, state.lora)
    lora = lora_mod.attach(model, state.lora_cfg.rank, state.lora_cfg.grouping, state.seed,
                           history=state.lora.history, task=task.index)
    losses, zeroed = train_lora(model, lora, replay, forget, task, obj, state.seed)
    record = task_report(state, task, lora, acc_f_before)
    norms = {g.name: g.norm() for g in lora.groups}
    merged = lora_mod.merge(lora)
    merged.tasks_merged = state.lora.tasks_merged + 1
    if model.fingerprint() != fingerprint:
        raise RuntimeError("base model parameters changed during a forgetting task")
    log = TaskLog(task.index, acc_f_before, len(replay), len(forget), losses, zeroed, norms)
    logger.info("task %d: acc_r=%.2f acc_f=%.2f (before %.2f) zero_groups=%.2f",
                task.index, record.acc_r, record.acc_f, acc_f_before, record.zero_group_ratio)
    return replace(state, lora=merged, forgotten=state.forgotten + [task.forget_classes],
                   records=state.records + [record], logs=state.logs + [log])


def run_schedule(state: EngineState, tasks, obj: ObjectiveConfig) -> EngineState:
    seen: set = set()
    for t in tasks:
        overlap = seen & set(t.forget_classes)
        if overlap:
            raise ValueError(f"forget classes {sorted(overlap)} appear in more than one task")
        seen |= set(t.forget_classes)
    for t in tasks:
        state = run_task(state, t, obj)
    return state


def baseline_plain_lora(state: EngineState, task: ForgettingTask, obj: ObjectiveConfig) -> EngineState:
    """GS-LoRA with the sparsity term switched off."""
    return run_task(state, task, replace(obj, alpha_k=0.0))


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


def baseline_retrain(config, replay: Dataset, epochs: int, opt: OptimizerConfig, seed: int) -> TransformerClassifier:
    """Fresh model trained only on the replay buffer for the same epoch budget."""
    from .model import train_epochs

    model = init_model(replace(config, dropout=0.0), seed)
    model.set_trainable(True)
    if epochs > 0 and len(replay):
        train_epochs(model, replay, model.parameters(), opt, epochs, seed, tag="retrain", stream_id=2000)
    model.set_trainable(False)
    return model


def relabel_wrong(labels, num_classes: int, rng) -> np.ndarray:
    """Replace every label by a uniformly drawn *different* class."""
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes < 2:
        raise ValueError("need at least two classes to draw a wrong label")
    shift = rng.integers(1, num_classes, size=labels.shape[0])
    return (labels + shift) % num_classes


def baseline_l2(model: TransformerClassifier, replay: Dataset, forget: Dataset, epochs: int,
                opt: OptimizerConfig, l2: float, seed: int) -> TransformerClassifier:
    """Full backbone fine-tune on replay + wrongly relabelled forget data, anchored by
    ``l2 * sum ||theta - theta_0||^2``; the head stays frozen."""
    tuned = model.copy()
    tuned.set_trainable(True, head=False)
    params = tuned.backbone_parameters()
    anchors = [p.data.copy() for p in params]
    wrong = Dataset(forget.x, relabel_wrong(forget.y, model.config.num_classes, stream(seed, "relabel")))
    data = Dataset.concat([replay, wrong])

    def loss_fn(logits, labels):
        ce = ad.softmax_cross_entropy(logits, labels)
        if l2 == 0.0:
            return ce
        pen = Tensor(0.0)
        for p, a in zip(params, anchors):
            diff = ad.sub(p, Tensor(a))
            pen = ad.add(pen, ad.sum(ad.mul(diff, diff)))
        return ad.add(ce, ad.scale(pen, l2))

    from .model import train_epochs

    if epochs > 0:
        train_epochs(tuned, data, params, opt, epochs, seed, loss_fn=loss_fn, tag="l2", stream_id=3000)
    tuned.set_trainable(False)
    return tuned


# ---------------------------------------------------------------------------
# recovery probe
# ---------------------------------------------------------------------------


def head_mask(model: TransformerClassifier, classes) -> TransformerClassifier:
    """Head-forgetting control: zero the head weights of ``classes`` and push their bias down."""
    masked = model.copy()
    cols = sorted(int(c) for c in classes)
    masked.head_w.data[:, cols] = 0.0
    masked.head_b.data[cols] = HEAD_MASK_BIAS
    return masked


@dataclass
class RecoveryCurve:
    epochs: list
    acc_f: list
    acc_r: list


def recovery_probe(model: TransformerClassifier, lora, train: Dataset, test: Dataset, forgotten,
                   probe_epochs: int, opt: OptimizerConfig, seed: int) -> RecoveryCurve:
    """Freeze the backbone (with ``lora`` merged in) and refit only the head on all classes.

    Point 0 of the curve is the state before any probe training.
    """
    forgotten = sorted(int(c) for c in forgotten)
    retained = [c for c in range(model.config.num_classes) if c not in forgotten]
    probe = model.copy()
    probe.set_trainable(False, head=True)
    feats_train = features(probe, train.x, lora).data
    f_mask = np.isin(test.y, forgotten)
    feats_test_f = features(probe, test.x[f_mask], lora).data
    feats_test_r = features(probe, test.x[~f_mask], lora).data
    y_f, y_r = test.y[f_mask], test.y[~f_mask]

    def evaluate():
        def acc(fe, y):
            if len(y) == 0:
                return 0.0
            logits = fe @ probe.head_w.data + probe.head_b.data
            return 100.0 * float(np.mean(np.argmax(logits, axis=1) == y))

        return acc(feats_test_f, y_f), acc(feats_test_r, y_r)

    af, ar = evaluate()
    curve = RecoveryCurve([0], [af], [ar])
    n = len(train)
    steps = max(1, math.ceil(n / opt.batch_size))
    params = probe.head_parameters()
    optimizer = AdamW(params, opt, total_steps=probe_epochs * steps)
    sampler = stream(seed, "sampling", 4000)
    for epoch in range(1, probe_epochs + 1):
        order = sampler.permutation(n)
        for s in range(steps):
            idx = order[s * opt.batch_size:(s + 1) * opt.batch_size]
            logits = ad.add(ad.matmul(Tensor(feats_train[idx]), probe.head_w), probe.head_b)
            ad.backward(ad.softmax_cross_entropy(logits, train.y[idx]), params=params)
            optimizer.step()
        af, ar = evaluate()
        curve.epochs.append(epoch)
        curve.acc_f.append(af)
        curve.acc_r.append(ar)
    return curve
