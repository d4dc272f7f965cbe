"""Datasets: synthetic Gaussian mixtures and CSV feature files."""

from __future__ import annotations

import csv
import dataclasses
import pathlib

import numpy as np


class DataFormatError(ValueError):
    """A dataset file is malformed."""


@dataclasses.dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: int

    def __post_init__(self):
        object.__setattr__(self, 'x', np.asarray(self.x, dtype=np.float64))
        if not np.all(np.isfinite(self.x)):
            raise ValueError('sample features must be finite')
        if int(self.y) < 0:
            raise ValueError(f'label must be non-negative, got {self.y}')
        object.__setattr__(self, 'y', int(self.y))


@dataclasses.dataclass(frozen=True)
class Dataset:
    """Feature matrix `X`, integer labels `y`, and stable per-row `ids`."""

    X: np.ndarray
    y: np.ndarray
    n_classes: int
    provenance: str = 'synthetic'
    ids: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise ValueError(f'inconsistent shapes X {X.shape}, y {y.shape}')
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise ValueError(f'labels must lie in [0, {self.n_classes})')
        if not np.all(np.isfinite(X)):
            raise ValueError('features must be finite')
        ids = np.arange(y.size) if self.ids is None else np.asarray(self.ids)
        if ids.shape != y.shape or np.unique(ids).size != ids.size:
            raise ValueError('ids must be unique, one per sample')
        object.__setattr__(self, 'X', X)
        object.__setattr__(self, 'y', y)
        object.__setattr__(self, 'ids', ids)

    def __len__(self) -> int:
        return int(self.y.size)

    def __getitem__(self, i) -> Sample:
        return Sample(self.X[i], int(self.y[i]))

    @property
    def dim(self) -> int:
        return int(self.X.shape[1])

    def subset(self, index) -> 'Dataset':
        index = np.asarray(index)
        return Dataset(self.X[index], self.y[index], self.n_classes,
                       self.provenance, self.ids[index])

    def without(self, i: int) -> 'Dataset':
        keep = np.ones(len(self), dtype=bool)
        keep[i] = False
        return self.subset(np.flatnonzero(keep))


def gen_synthetic(n: int, dim: int, classes: int, separation: float,
                  rng: np.random.Generator) -> Dataset:
    """Gaussian class clusters with means on a sphere of radius `separation`.

    Labels are uniform over classes; features are unit-variance around the
    class mean.
    """
    if n < 1 or dim < 1 or classes < 1:
        raise ValueError('n, dim and classes must be positive')
    if separation < 0:
        raise ValueError('separation must be non-negative')
    means = rng.standard_normal((classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    y = rng.integers(0, classes, size=n)
    X = means[y] + rng.standard_normal((n, dim))
    return Dataset(X, y, classes, 'synthetic')


def split_aux(dataset: Dataset, fraction: float,
              rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Random disjoint split; the second part holds `fraction` of samples."""
    if not 0 < fraction < 1:
        raise ValueError(f'fraction must be in (0, 1), got {fraction}')
    n_aux = int(round(fraction * len(dataset)))
    if n_aux == 0 or n_aux == len(dataset):
        raise ValueError(
            f'fraction {fraction} leaves one side of a {len(dataset)}-sample '
            'split empty')
    perm = rng.permutation(len(dataset))
    return (dataset.subset(np.sort(perm[n_aux:])),
            dataset.subset(np.sort(perm[:n_aux])))


def write_csv(dataset: Dataset, path) -> None:
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['label'] + [f'feat_{j}' for j in range(dataset.dim)])
        for x, y in zip(dataset.X, dataset.y):
            writer.writerow([int(y)] + [repr(float(v)) for v in x])


def load_csv(path, n_classes: int | None = None) -> Dataset:
    """Loads ``label,feat_0,...,feat_{d-1}`` rows below a one-line header.

    `n_classes` defaults to one more than the largest label seen.
    """
    path = pathlib.Path(path)
    with open(path, newline='') as f:
        rows = list(csv.reader(f))
    if not rows:
        raise DataFormatError(f'{path}: empty file')
    header = rows[0]
    if not header or header[0].strip() != 'label':
        raise DataFormatError(f'{path}:1: header must start with "label"')
    dim = len(header) - 1
    if dim < 1:
        raise DataFormatError(f'{path}:1: header declares no feature columns')
    labels, feats = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != dim + 1:
            raise DataFormatError(
                f'{path}:{lineno}: expected {dim + 1} fields, got {len(row)}')
        try:
            label = int(row[0])
            values = [float(v) for v in row[1:]]
        except ValueError as e:
            raise DataFormatError(f'{path}:{lineno}: {e}') from None
        if label < 0 or not all(np.isfinite(values)):
            raise DataFormatError(
                f'{path}:{lineno}: labels must be >= 0 and features finite')
        labels.append(label)
        feats.append(values)
    if not labels:
        raise DataFormatError(f'{path}: no data rows')
    y = np.asarray(labels, dtype=np.int64)
    classes = int(y.max()) + 1 if n_classes is None else n_classes
    return Dataset(np.asarray(feats), y, classes, 'csv')
