"""Synthetic data, label-skew Dirichlet partitioning and a CSV loader."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore import ConfigError, ContractError

__all__ = [
    "Dataset",
    "Partition",
    "ParseError",
    "make_blobs",
    "dirichlet_partition",
    "train_test_split",
    "load_csv",
    "write_csv",
]


class ParseError(ValueError):
    """Malformed tabular input. ``line`` is 1-based and counts the header."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    num_classes: int = 0

    def __post_init__(self):
        x, y = self.features, self.labels
        if x.ndim != 2 or x.shape[0] < 1:
            raise ContractError("features must be a non-empty 2-d matrix")
        if y.shape != (x.shape[0],):
            raise ContractError("labels must match the number of samples")
        if not np.isfinite(x).all():
            raise ContractError("features must be finite")
        if y.min() < 0:
            raise ContractError("labels must be non-negative")
        if self.num_classes == 0:
            object.__setattr__(self, "num_classes", max(int(y.max()) + 1, 2))
        elif y.max() >= self.num_classes:
            raise ContractError("label exceeds num_classes")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.features[idx], self.labels[idx], name or self.name, self.num_classes
        )


@dataclass
class Partition:
    assignments: list[np.ndarray]
    beta: float
    seed: int | None = None
    moved: int = field(default=0)

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]


def make_blobs(
    num_classes: int,
    input_dim: int,
    samples_per_class: int,
    spread: float,
    rng: np.random.Generator,
) -> Dataset:
    """Isotropic Gaussian cluster per class, means on the unit sphere.

    Samples are grouped by class (class 0 first); shuffle downstream if
    order matters.
    """
    if min(num_classes, input_dim, samples_per_class) < 1 or num_classes < 2:
        raise ConfigError("num_classes >= 2, input_dim >= 1, samples_per_class >= 1")
    if spread < 0:
        raise ConfigError("spread must be non-negative")
    means = rng.standard_normal((num_classes, input_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    noise = rng.standard_normal((labels.size, input_dim))
    return Dataset(means[labels] + spread * noise, labels, "blobs", num_classes)


def train_test_split(ds: Dataset, test_fraction: float, rng: np.random.Generator):
    """Random split into ``(train, test)``."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError("test_fraction must lie in (0, 1)")
    order = rng.permutation(len(ds))
    n_test = max(1, int(round(test_fraction * len(ds))))
    return ds.subset(order[n_test:], ds.name), ds.subset(order[:n_test], ds.name + "-test")


def dirichlet_partition(
    ds: Dataset,
    num_clients: int,
    beta: float,
    min_samples: int,
    rng: np.random.Generator,
    seed: int | None = None,
) -> Partition:
    """Label-skew split: for each class, client shares ~ Dirichlet(beta).

    Clients that end up with fewer than ``min_samples`` are topped up one
    sample at a time from whichever client currently holds the most, so
    the union of assignments stays exactly ``range(len(ds))``.
    """
    if num_clients < 1:
        raise ConfigError("num_clients must be >= 1")
    if not beta > 0:
        raise ConfigError("beta must be positive")
    if min_samples < 1:
        raise ConfigError("min_samples must be >= 1")
    if min_samples * num_clients > len(ds):
        raise ConfigError(
            f"{len(ds)} samples cannot give {num_clients} clients {min_samples} each"
        )

    buckets: list[list[int]] = [[] for _ in range(num_clients)]
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        shares = rng.dirichlet(np.full(num_clients, beta))
        cuts = (np.cumsum(shares)[:-1] * idx.size).astype(np.int64)
        for k, part in enumerate(np.split(idx, cuts)):
            buckets[k].extend(part.tolist())

    moved = 0
    sizes = np.array([len(b) for b in buckets])
    for k in np.flatnonzero(sizes < min_samples):
        while len(buckets[k]) < min_samples:
            donor = int(np.argmax([len(b) for b in buckets]))
            buckets[k].append(buckets[donor].pop())
            moved += 1

    assignments = [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets]
    return Partition(assignments, beta, seed, moved)


def load_csv(path) -> Dataset:
    """Read ``f0,...,fK,label`` rows. Errors name the offending line."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = rows[0]
    if len(header) < 2 or header[-1].strip() != "label":
        raise ParseError("header must be f0,...,fK,label", line=1)
    width = len(header)
    feats, labels = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != width:
            raise ParseError(f"expected {width} fields, got {len(row)}", line=lineno)
        try:
            vals = [float(v) for v in row[:-1]]
        except ValueError as exc:
            raise ParseError(f"non-numeric feature ({exc})", line=lineno) from None
        try:
            lab = float(row[-1])
        except ValueError:
            raise ParseError(f"non-numeric label {row[-1]!r}", line=lineno) from None
        if lab != int(lab) or lab < 0:
            raise ParseError(f"label must be a non-negative integer, got {row[-1]!r}", line=lineno)
        if not np.isfinite(vals).all():
            raise ParseError("non-finite feature", line=lineno)
        feats.append(vals)
        labels.append(int(lab))
    if not feats:
        raise ParseError(f"{path}: no data rows")
    return Dataset(np.array(feats), np.array(labels, dtype=np.int64), path.stem)


def write_csv(ds: Dataset, path) -> None:
    d = ds.input_dim
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(d)] + ["label"])
        for row, lab in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(lab)])
