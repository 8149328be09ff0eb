"""Synthetic tabular tasks, CSV I/O and the four-way target/shadow split."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class TabularDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    name: str = "dataset"

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise DatasetError("features must be (n, d) with one label per row")
        if np.isnan(self.features).any():
            raise DatasetError("missing feature values")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DatasetError("labels outside [0, n_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> tuple[np.ndarray, np.ndarray]:
        return self.features[idx], self.labels[idx]


@dataclass(frozen=True)
class SynthConfig:
    n_classes: int = 100
    n_features: int = 600
    samples_per_class: int = 80
    prototype_flip_prob: float = 0.3
    seed: int = 0
    name: str = "purchases"

    def __post_init__(self):
        if not 0 <= self.prototype_flip_prob < 0.5:
            raise ValueError("prototype_flip_prob must lie in [0, 0.5)")


# Desk-scale analogues of the three tabular benchmarks.
PRESETS = {
    "purchases": SynthConfig(100, 600, 80, 0.3, name="purchases"),
    "locations": SynthConfig(30, 446, 120, 0.3, name="locations"),
    "texas": SynthConfig(100, 1000, 80, 0.3, name="texas"),
}


def synth_generate(config: SynthConfig) -> TabularDataset:
    """Each class gets a random binary prototype; samples flip each bit
    independently with ``prototype_flip_prob``."""
    rng = np.random.default_rng(config.seed)
    protos = rng.integers(0, 2, size=(config.n_classes, config.n_features), dtype=np.int8)
    labels = np.repeat(np.arange(config.n_classes), config.samples_per_class)
    flips = rng.random((len(labels), config.n_features)) < config.prototype_flip_prob
    features = (protos[labels] ^ flips).astype(np.float64)
    return TabularDataset(features, labels, config.n_classes, config.name)


def prototypes(config: SynthConfig) -> np.ndarray:
    rng = np.random.default_rng(config.seed)
    return rng.integers(0, 2, size=(config.n_classes, config.n_features), dtype=np.int8)


def shifted_variant(config: SynthConfig, shift_seed: int) -> TabularDataset:
    """Same shape, fresh prototypes and a noisier flip rate (+0.05)."""
    flip = min(config.prototype_flip_prob + 0.05, 0.49)
    shifted = replace(config, seed=shift_seed, prototype_flip_prob=flip, name=f"{config.name}-shifted")
    return synth_generate(shifted)


@dataclass(frozen=True)
class FourWaySplit:
    target_train: np.ndarray
    target_test: np.ndarray
    shadow_train: np.ndarray
    shadow_test: np.ndarray

    def parts(self) -> list[np.ndarray]:
        return [self.target_train, self.target_test, self.shadow_train, self.shadow_test]

    def to_dict(self) -> dict:
        names = ("target_train", "target_test", "shadow_train", "shadow_test")
        return {k: v.tolist() for k, v in zip(names, self.parts())}

    @classmethod
    def from_dict(cls, d: dict) -> "FourWaySplit":
        return cls(*(np.asarray(d[k], dtype=np.int64) for k in
                     ("target_train", "target_test", "shadow_train", "shadow_test")))


def split_four(n: int, seed: int) -> FourWaySplit:
    """Uniformly random partition of ``range(n)`` into four near-equal parts."""
    if n < 4:
        raise DatasetError(f"need at least 4 samples to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    return FourWaySplit(*np.array_split(perm, 4))


def write_csv(dataset: TabularDataset, path, label_column: str = "label") -> None:
    header = [f"f{i}" for i in range(dataset.n_features)] + [label_column]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def load_csv(path, label_column: str = "label", name: str | None = None) -> TabularDataset:
    """Read a comma-separated file with a header row.

    Every non-label column must be numeric; the label column must hold
    non-negative integers.  Errors name the offending line and column.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if label_column not in header:
            raise DatasetError(f"{path}: no column named {label_column!r}")
        rows, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DatasetError(
                    f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}"
                )
            values = []
            for col, cell in zip(header, row):
                if cell.strip() == "":
                    raise DatasetError(f"{path}:{lineno}: missing value in column {col!r}")
                if col == label_column:
                    try:
                        label = int(cell)
                    except ValueError:
                        raise DatasetError(
                            f"{path}:{lineno}: non-integer label {cell!r}"
                        ) from None
                    if label < 0:
                        raise DatasetError(f"{path}:{lineno}: negative label {label}")
                    labels.append(label)
                else:
                    try:
                        values.append(float(cell))
                    except ValueError:
                        raise DatasetError(
                            f"{path}:{lineno}: non-numeric value {cell!r} in column {col!r}"
                        ) from None
            rows.append(values)
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    labels = np.asarray(labels, dtype=np.int64)
    features = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header) - 1)
    return TabularDataset(features, labels, int(labels.max()) + 1, name or path.stem)
