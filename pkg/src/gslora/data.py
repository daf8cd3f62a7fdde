"""Synthetic class-prototype sequence datasets."""

from dataclasses import dataclass

import numpy as np

from .rng import stream


@dataclass(frozen=True)
class SyntheticDatasetConfig:
    num_classes: int = 10
    train_per_class: int = 60
    test_per_class: int = 40
    seq_len: int = 4
    input_dim: int = 16
    noise_sigma: float = 0.8
    sign_flip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.train_per_class < 1 or self.test_per_class < 0:
            raise ValueError("need train_per_class >= 1 and test_per_class >= 0")
        if self.seq_len < 1 or self.input_dim < 1:
            raise ValueError("seq_len and input_dim must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class Dataset:
    x: np.ndarray  # [n, seq_len, input_dim]
    y: np.ndarray  # [n] int64

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 3 or self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"inconsistent dataset shapes x={self.x.shape} y={self.y.shape}")

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx])

    def filter_classes(self, classes) -> "Dataset":
        mask = np.isin(self.y, np.asarray(sorted(classes), dtype=np.int64))
        return Dataset(self.x[mask], self.y[mask])

    def classes(self) -> list:
        return sorted(int(c) for c in np.unique(self.y))

    @staticmethod
    def concat(parts) -> "Dataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        return Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]))


@dataclass
class Splits:
    train: Dataset
    test: Dataset


def generate_dataset(cfg: SyntheticDatasetConfig) -> Splits:
    """One Gaussian prototype sequence per class; samples add isotropic noise.

    With ``sign_flip`` each sample is the prototype times a random sign, so every
    class has zero mean and no linear read-out of the raw input separates the
    classes. Samples are ordered class-major; train and test are drawn
    independently.
    """
    rng = stream(cfg.seed, "data")
    shape = (cfg.num_classes, cfg.seq_len, cfg.input_dim)
    prototypes = rng.standard_normal(shape)

    def draw(per_class: int) -> Dataset:
        noise = rng.standard_normal((cfg.num_classes, per_class, cfg.seq_len, cfg.input_dim))
        signs = np.ones((cfg.num_classes, per_class, 1, 1))
        if cfg.sign_flip:
            signs = rng.choice([-1.0, 1.0], size=signs.shape)
        x = signs * prototypes[:, None] + cfg.noise_sigma * noise
        y = np.repeat(np.arange(cfg.num_classes), per_class)
        return Dataset(x.reshape(-1, cfg.seq_len, cfg.input_dim), y)

    train = draw(cfg.train_per_class)
    test = draw(cfg.test_per_class)
    return Splits(train=train, test=test)
