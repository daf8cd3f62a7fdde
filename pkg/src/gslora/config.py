"""Experiment configuration: TOML schema, validation, hashing, run manifests.

Config format version 1. Sections and keys::

    [experiment]  seed, output_dir, format_version
    [data]        num_classes, train_per_class, test_per_class, seq_len,
                  input_dim, noise_sigma, sign_flip
    [model]       num_blocks, model_dim, num_heads, ffn_hidden_dim, dropout
    [pretrain]    epochs, lr, min_lr, weight_decay, batch_size
    [objective]   bnd (required), beta, alpha_k, warmup_epochs, prox_mode
    [lora]        rank, grouping
    [optimizer]   lr, min_lr, weight_decay, batch_size     (forgetting tasks)
    [probe]       epochs, lr, min_lr, weight_decay, batch_size  (recovery probe)
    [[tasks]]     forget (required), epochs, data_ratio, excluded_replay

``seq_len``, ``input_dim`` and ``num_classes`` are shared by data and model.
Unknown sections or keys and missing required keys raise ``ConfigError``.
"""

from __future__ import annotations

from dataclasses import MISSING, asdict, dataclass, field, fields
import hashlib
import json
import platform
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from .data import SyntheticDatasetConfig
from .engine import ForgettingTask, LoraConfig
from .model import ModelConfig
from .objective import ObjectiveConfig
from .optim import OptimizerConfig

FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentSection:
    seed: int = 0
    output_dir: str = "runs"
    format_version: int = FORMAT_VERSION


@dataclass(frozen=True)
class DataSection:
    num_classes: int = 10
    train_per_class: int = 60
    test_per_class: int = 40
    seq_len: int = 4
    input_dim: int = 16
    noise_sigma: float = 0.8
    sign_flip: bool = True


@dataclass(frozen=True)
class ModelSection:
    num_blocks: int = 4
    model_dim: int = 256
    num_heads: int = 4
    ffn_hidden_dim: int = 128
    dropout: float = 0.1


@dataclass(frozen=True)
class PretrainSection:
    epochs: int = 25
    lr: float = 1e-3
    min_lr: float = 1e-5
    weight_decay: float = 0.05
    batch_size: int = 32


@dataclass(frozen=True)
class OptimSection:
    lr: float = 1e-2
    min_lr: float = 1e-5
    weight_decay: float = 0.05
    batch_size: int = 16


@dataclass(frozen=True)
class ProbeSection:
    epochs: int = 20
    lr: float = 1e-2
    min_lr: float = 1e-5
    weight_decay: float = 0.05
    batch_size: int = 32


@dataclass(frozen=True)
class ObjectiveSection:
    bnd: float
    beta: float = 0.15
    alpha_k: float = 20.0
    warmup_epochs: int = 20
    prox_mode: str = "proximal"


@dataclass(frozen=True)
class LoraSection:
    rank: int = 8
    grouping: str = "block"


@dataclass(frozen=True)
class TaskSection:
    forget: tuple
    epochs: int = 100
    data_ratio: float = 0.1
    excluded_replay: tuple = ()


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection
    data: DataSection
    model: ModelSection
    pretrain: PretrainSection
    objective: ObjectiveSection
    lora: LoraSection
    optimizer: OptimSection
    probe: ProbeSection
    tasks: tuple = field(default_factory=tuple)

    # ---- derived runtime objects -------------------------------------------------

    @property
    def seed(self) -> int:
        return self.experiment.seed

    def dataset_config(self) -> SyntheticDatasetConfig:
        return SyntheticDatasetConfig(seed=self.seed, **asdict(self.data))

    def model_config(self) -> ModelConfig:
        return ModelConfig(seq_len=self.data.seq_len, input_dim=self.data.input_dim,
                           num_classes=self.data.num_classes, **asdict(self.model))

    def pretrain_optimizer(self) -> OptimizerConfig:
        p = self.pretrain
        return OptimizerConfig(lr=p.lr, min_lr=p.min_lr, weight_decay=p.weight_decay, batch_size=p.batch_size)

    def forget_optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(**asdict(self.optimizer))

    def probe_optimizer(self) -> OptimizerConfig:
        p = self.probe
        return OptimizerConfig(lr=p.lr, min_lr=p.min_lr, weight_decay=p.weight_decay, batch_size=p.batch_size)

    def objective_config(self) -> ObjectiveConfig:
        return ObjectiveConfig(bnd=self.objective.bnd, beta=self.objective.beta, alpha_k=self.objective.alpha_k,
                               warmup_epochs=self.objective.warmup_epochs, prox_mode=self.objective.prox_mode)

    def lora_config(self) -> LoraConfig:
        return LoraConfig(rank=self.lora.rank, grouping=self.lora.grouping)

    def forgetting_tasks(self) -> list:
        opt = self.forget_optimizer()
        return [ForgettingTask(index=i + 1, forget_classes=t.forget, data_ratio=t.data_ratio,
                               excluded_replay=t.excluded_replay, epochs=t.epochs, optimizer=opt)
                for i, t in enumerate(self.tasks)]

    # ---- serialisation --------------------------------------------------------

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "tasks":
                out["tasks"] = [{k: list(x) if isinstance(x, tuple) else x for k, x in asdict(t).items()} for t in v]
            else:
                out[f.name] = asdict(v)
        return out

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


_SECTIONS = {
    "experiment": ExperimentSection,
    "data": DataSection,
    "model": ModelSection,
    "pretrain": PretrainSection,
    "objective": ObjectiveSection,
    "lora": LoraSection,
    "optimizer": OptimSection,
    "probe": ProbeSection,
}


def _coerce(section: str, name: str, value, default):
    where = f"{section}.{name}"
    if isinstance(default, bool) or name == "sign_flip":
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) or name in ("forget",):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or name in ("bnd",):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _build(section: str, cls, raw):
    if not isinstance(raw, dict):
        raise ConfigError(f"[{section}] must be a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"[{section}]: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, f in known.items():
        default = f.default if f.default is not MISSING else None
        if name not in raw:
            if f.default is MISSING:
                raise ConfigError(f"[{section}]: missing required key '{name}'")
            continue
        value = raw[name]
        if name in ("forget", "excluded_replay"):
            if not isinstance(value, list) or any(isinstance(v, bool) or not isinstance(v, int) for v in value):
                raise ConfigError(f"{section}.{name}: expected a list of integers, got {value!r}")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = _coerce(section, name, value, default)
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def from_dict(raw: dict) -> ExperimentConfig:
    """Validate a parsed config document and fill defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a table")
    unknown = sorted(set(raw) - set(_SECTIONS) - {"tasks"})
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    if "objective" not in raw:
        raise ConfigError("missing required section [objective] (needs 'bnd')")
    built = {}
    for name, cls in _SECTIONS.items():
        built[name] = _build(name, cls, raw.get(name, {}))
    tasks_raw = raw.get("tasks", [])
    if not isinstance(tasks_raw, list):
        raise ConfigError("tasks must be an array of tables ([[tasks]])")
    tasks = tuple(_build(f"tasks[{i}]", TaskSection, t) for i, t in enumerate(tasks_raw))
    cfg = ExperimentConfig(tasks=tasks, **built)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    """Cross-field checks; constructs every runtime object once to surface errors."""
    if cfg.experiment.format_version != FORMAT_VERSION:
        raise ConfigError(f"experiment.format_version {cfg.experiment.format_version} != {FORMAT_VERSION}")
    try:
        cfg.dataset_config()
        cfg.model_config()
        cfg.pretrain_optimizer()
        cfg.forget_optimizer()
        cfg.probe_optimizer()
        cfg.objective_config()
        tasks = cfg.forgetting_tasks()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.lora.grouping not in ("block", "module", "matrix"):
        raise ConfigError(f"lora.grouping must be block, module or matrix, got {cfg.lora.grouping!r}")
    if cfg.lora.rank < 1 or cfg.lora.rank >= min(cfg.model.model_dim, cfg.model.ffn_hidden_dim):
        raise ConfigError(f"lora.rank {cfg.lora.rank} must lie in [1, min(model_dim, ffn_hidden_dim))")
    seen: set = set()
    for t in tasks:
        bad = [c for c in t.forget_classes if not 0 <= c < cfg.data.num_classes]
        if bad:
            raise ConfigError(f"tasks[{t.index - 1}].forget: classes {bad} outside [0, {cfg.data.num_classes})")
        if seen & set(t.forget_classes):
            raise ConfigError(f"tasks[{t.index - 1}].forget: classes {sorted(seen & set(t.forget_classes))} repeat an earlier task")
        seen |= set(t.forget_classes)
    # replay + forget data per task must stay well under the pretraining set
    budget = 0.5 * cfg.data.num_classes * cfg.data.train_per_class
    for t in tasks:
        used = t.data_ratio * cfg.data.num_classes * cfg.data.train_per_class
        if used >= budget:
            raise ConfigError(f"tasks[{t.index - 1}].data_ratio {t.data_ratio} uses >= half the pretraining data")


def loads(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return from_dict(raw)


def load(path) -> ExperimentConfig:
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: invalid TOML: {exc}") from exc
    return from_dict(raw)


def manifest(cfg: ExperimentConfig, command: str, extra=None) -> dict:
    from . import __version__, _kernels

    try:
        import numba

        numba_version = numba.__version__
    except ImportError:  # pragma: no cover
        numba_version = None
    doc = {
        "command": command,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "versions": {
            "gslora": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "numba": numba_version,
            "kernel_backend": _kernels.BACKEND,
            "platform": sys.platform,
        },
    }
    if extra:
        doc.update(extra)
    return doc
