"""Synthetic dataset generation and feature-file ingestion.

Features travel as CSV with header ``label,f0,...,f{D-1}``; labels are
remapped to dense ids 1..C at load time so downstream code can assume a
dense label range.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptyFile, InsufficientClasses, InvalidFraction, NonFiniteValue, ParseError


@dataclass
class FeatureDataset:
    """Raw feature matrix with dense labels 1..C and a split tag."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("labels length does not match feature rows")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def gaussian_blobs(
    classes: int,
    per_class: int,
    input_dim: int,
    center_scale: float = 1.0,
    noise_sigma: float = 0.1,
    seed: int = 0,
    split: str = "train",
) -> FeatureDataset:
    """Isotropic Gaussian clusters around uniformly drawn centers."""
    if classes < 1 or per_class < 1 or input_dim < 1:
        raise ValueError("classes, per_class and input_dim must be positive")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(-center_scale, center_scale, size=(classes, input_dim))
    noise = rng.normal(0.0, noise_sigma, size=(classes, per_class, input_dim)) if noise_sigma > 0 else 0.0
    feats = (centers[:, None, :] + noise).reshape(classes * per_class, input_dim)
    labels = np.repeat(np.arange(1, classes + 1), per_class)
    return FeatureDataset(feats, labels, classes, split)


def load_feature_csv(path: str, split: str = "train") -> FeatureDataset:
    """Read a feature CSV, remapping labels to dense 1..C by first appearance."""
    rows = []
    labels_raw = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyFile(f"{path} is empty") from None
        if not header or header[0].strip() != "label":
            raise ParseError(1, f"expected header starting with 'label', got {header[:1]}")
        width = len(header) - 1
        if width < 1:
            raise ParseError(1, "header declares no feature columns")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width + 1:
                raise ParseError(lineno, f"expected {width + 1} fields, got {len(row)}")
            try:
                label = int(row[0])
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ParseError(lineno, str(exc)) from None
            if not all(math.isfinite(v) for v in values):
                raise NonFiniteValue(lineno)
            labels_raw.append(label)
            rows.append(values)
    if not rows:
        raise EmptyFile(f"{path} has a header but no data rows")
    remap: dict[int, int] = {}
    dense = []
    for lbl in labels_raw:
        if lbl not in remap:
            remap[lbl] = len(remap) + 1
        dense.append(remap[lbl])
    return FeatureDataset(np.array(rows), np.array(dense), len(remap), split)


def save_feature_csv(dataset: FeatureDataset, path: str) -> None:
    """Write a dataset in the load_feature_csv schema, round-trip exact."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"f{i}" for i in range(dataset.dim)])
        for lbl, row in zip(dataset.labels, dataset.features):
            writer.writerow([int(lbl)] + [repr(float(v)) for v in row])


def class_disjoint_split(
    dataset: FeatureDataset, train_fraction_of_classes: float, seed: int = 0
) -> tuple[FeatureDataset, FeatureDataset]:
    """Partition classes (not samples) into disjoint train and test sets.

    Both sides get their labels re-densified to 1..C_side preserving the
    original class order.
    """
    f = train_fraction_of_classes
    if not (0.0 < f < 1.0):
        raise InvalidFraction(f"train fraction must be in (0, 1), got {f}")
    classes = np.unique(dataset.labels)
    if classes.size < 2:
        raise InsufficientClasses("need at least 2 classes to split")
    n_train = int(round(f * classes.size))
    n_train = min(max(n_train, 1), classes.size - 1)
    rng = np.random.default_rng(seed)
    shuffled = rng.permutation(classes)
    train_classes = set(shuffled[:n_train].tolist())

    def subset(selected: np.ndarray, tag: str) -> FeatureDataset:
        mask = np.isin(dataset.labels, selected)
        feats = dataset.features[mask]
        labels = dataset.labels[mask]
        remap = {int(c): i + 1 for i, c in enumerate(np.unique(labels))}
        dense = np.array([remap[int(l)] for l in labels], dtype=np.int64)
        return FeatureDataset(feats, dense, len(remap), tag)

    train_sel = np.array(sorted(train_classes))
    test_sel = np.array(sorted(set(classes.tolist()) - train_classes))
    return subset(train_sel, "train"), subset(test_sel, "test")
