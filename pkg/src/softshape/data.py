"""Dataset loading, imputation, normalization and merged 3:1:1 splits.

File format: one record per line, class label first, then the observations,
tab-separated (comma-separated for ``.csv`` files). ``NaN`` tokens mark
missing values; shorter lines are padded with missing values up to the
longest record.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

ZNORM_EPS = 1e-8


@dataclass(frozen=True)
class TimeSeriesRecord:
    """One labeled series; NaN entries are missing observations."""

    values: np.ndarray
    label: int


@dataclass(frozen=True)
class Dataset:
    records: list[TimeSeriesRecord]
    num_classes: int
    series_length: int
    name: str = ""

    @property
    def sample_count(self) -> int:
        return len(self.records)

    def to_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stack records into (N, T) values and (N,) labels."""
        values = np.stack([r.values for r in self.records])
        labels = np.array([r.label for r in self.records], dtype=np.int64)
        return values, labels


@dataclass(frozen=True)
class SplitSpec:
    """Disjoint train/val/test index lists covering 0..N-1."""

    train: list[int]
    val: list[int]
    test: list[int]
    seed: int


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def load_ucr_tsv(path: str | os.PathLike) -> Dataset:
    """Load a labeled series file, remapping labels to contiguous ids.

    Labels are remapped to 0..C-1 by the sorted order of the distinct values
    found in the file. Records shorter than the longest one are padded with
    NaN so every record shares the same length.
    """
    delimiter = "," if str(path).lower().endswith(".csv") else "\t"
    raw_labels: list[float] = []
    raw_values: list[list[float]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(delimiter)
            if len(fields) < 2:
                raise ValueError(
                    f"{path}: line {lineno} has {len(fields)} field(s), need a label and at least one value"
                )
            try:
                label = float(fields[0])
                values = [float(tok) for tok in fields[1:]]
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: non-numeric token ({exc})") from None
            if math.isnan(label):
                raise ValueError(f"{path}: line {lineno}: label is NaN")
            raw_labels.append(label)
            raw_values.append(values)
    if not raw_labels:
        raise ValueError(f"{path}: empty dataset file")

    series_length = max(len(v) for v in raw_values)
    label_map = {orig: idx for idx, orig in enumerate(sorted(set(raw_labels)))}
    records = []
    for label, values in zip(raw_labels, raw_values):
        padded = np.full(series_length, np.nan, dtype=np.float64)
        padded[: len(values)] = values
        records.append(TimeSeriesRecord(_readonly(padded), label_map[label]))
    name = os.path.splitext(os.path.basename(str(path)))[0]
    return Dataset(records, num_classes=len(label_map), series_length=series_length, name=name)


def znormalize(series: np.ndarray) -> np.ndarray:
    """Standardize one series to mean 0, population std 1.

    Missing (NaN) entries are ignored when estimating the statistics and kept
    in place. Constant series map to the zero vector via the epsilon guard.
    """
    x = np.asarray(series, dtype=np.float64)
    if x.size < 1:
        raise ValueError("znormalize needs at least one value")
    observed = ~np.isnan(x)
    if not observed.any():
        return x.copy()
    mean = x[observed].mean()
    std = x[observed].std()
    return (x - mean) / (std + ZNORM_EPS)


def znormalize_dataset(dataset: Dataset) -> Dataset:
    records = [
        TimeSeriesRecord(_readonly(znormalize(r.values)), r.label) for r in dataset.records
    ]
    return Dataset(records, dataset.num_classes, dataset.series_length, dataset.name)


def timestep_means(dataset: Dataset, train_indices: list[int]) -> np.ndarray:
    """Per-timestep mean of the observed training values; 0.0 where none exist."""
    if len(train_indices) == 0:
        raise ValueError("train_indices must be nonempty")
    train = np.stack([dataset.records[i].values for i in train_indices])
    observed = ~np.isnan(train)
    counts = observed.sum(axis=0)
    sums = np.where(observed, train, 0.0).sum(axis=0)
    means = np.zeros(dataset.series_length, dtype=np.float64)
    np.divide(sums, counts, out=means, where=counts > 0)
    return means


def fill_missing(values: np.ndarray, means: np.ndarray) -> np.ndarray:
    out = np.asarray(values, dtype=np.float64).copy()
    missing = np.isnan(out)
    out[missing] = means[missing]
    return out


def impute_missing(dataset: Dataset, train_indices: list[int]) -> Dataset:
    """Replace missing values with the training per-timestep mean (0 if unseen)."""
    means = timestep_means(dataset, train_indices)
    records = [
        TimeSeriesRecord(_readonly(fill_missing(r.values, means)), r.label)
        for r in dataset.records
    ]
    return Dataset(records, dataset.num_classes, dataset.series_length, dataset.name)


def split_merged(dataset: Dataset, seed: int) -> SplitSpec:
    """Shuffle 0..N-1 under the seed and cut val/test chunks of size N//5 each."""
    n = dataset.sample_count
    if n < 5:
        raise ValueError(f"need at least 5 samples to split 3:1:1, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    chunk = n // 5
    test = sorted(int(i) for i in perm[:chunk])
    val = sorted(int(i) for i in perm[chunk : 2 * chunk])
    train = sorted(int(i) for i in perm[2 * chunk :])
    return SplitSpec(train=train, val=val, test=test, seed=seed)


def batch_size(n_train: int) -> int:
    """Training batch size: one tenth of the training set, capped at 16."""
    if n_train < 1:
        raise ValueError("n_train must be positive")
    return max(1, min(n_train // 10, 16))


def prepare_dataset(dataset: Dataset, train_indices: list[int], normalize: bool = True) -> Dataset:
    """Standard preprocessing: per-series z-norm, then train-mean imputation."""
    if normalize:
        dataset = znormalize_dataset(dataset)
    return impute_missing(dataset, train_indices)
