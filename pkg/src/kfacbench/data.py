"""Synthetic datasets and deterministic mini-batch iteration."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import stream

CLASSIFICATION = "classification"
REGRESSION = "regression"


class ParameterError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    task: str
    n_classes: int = 0
    w_true: np.ndarray | None = None

    def __post_init__(self):
        if self.x.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise ParameterError(f"x has shape {self.x.shape} but y has {self.y.shape[0]} rows")
        if self.task == CLASSIFICATION:
            if self.y.size and (self.y.min() < 0 or self.y.max() >= self.n_classes):
                raise ParameterError("class labels must lie in [0, n_classes)")
        elif self.task != REGRESSION:
            raise ParameterError(f"unknown task {self.task!r}")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def n_features(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx], self.task, self.n_classes, self.w_true)

    def equals(self, other: "Dataset") -> bool:
        return (
            self.task == other.task
            and self.n_classes == other.n_classes
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
        )


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    seed: int = 0
    drop_last: bool = False

    def validate(self, n: int) -> None:
        if not 1 <= self.batch_size <= n:
            raise ParameterError(f"batch_size must be in [1, {n}], got {self.batch_size}")

    def iterations_per_epoch(self, n: int) -> int:
        if self.drop_last:
            return n // self.batch_size
        return math.ceil(n / self.batch_size)


def _standardize(x: np.ndarray) -> np.ndarray:
    sd = x.std(axis=0)
    sd[sd == 0] = 1.0
    return (x - x.mean(axis=0)) / sd


def _lattice_means(k: int, d: int, scale: float) -> np.ndarray:
    # Points of a centred grid with spacing 2 (coordinates -L+1, -L+3, ..., L-1)
    # where L is the smallest side length with L**d >= k; class c takes the
    # base-L digits of c as grid indices.
    side = 2
    while side**d < k:
        side += 1
    means = np.zeros((k, d))
    for c in range(k):
        rem = c
        for j in range(d):
            rem, digit = divmod(rem, side)
            means[c, j] = 2 * digit - (side - 1)
    return scale * means


def gen_blobs(seed: int, n: int, d: int, k: int, spread: float) -> Dataset:
    """Balanced Gaussian clusters around lattice points spaced ``8 * spread`` apart."""
    if not (n >= k >= 2) or d < 1 or not spread > 0:
        raise ParameterError(f"invalid blob parameters n={n} d={d} k={k} spread={spread}")
    rng = stream(seed, "blobs")
    labels = np.arange(n) % k
    labels = labels[rng.permutation(n)]
    means = _lattice_means(k, d, 4.0 * spread)
    x = means[labels] + spread * rng.standard_normal((n, d))
    return Dataset(_standardize(x), labels.astype(np.int64), CLASSIFICATION, k)


def gen_linreg(seed: int, n: int, d: int, noise_sd: float, max_retries: int = 3) -> Dataset:
    if not (n > d >= 1) or noise_sd < 0:
        raise ParameterError(f"invalid regression parameters n={n} d={d} noise_sd={noise_sd}")
    for attempt in range(max_retries + 1):
        rng = stream(seed, "linreg", attempt)
        x = _standardize(rng.standard_normal((n, d)))
        if np.linalg.matrix_rank(x) == d:
            break
    else:
        raise ParameterError("could not generate a full-rank design matrix")
    w = rng.standard_normal(d)
    y = x @ w + noise_sd * rng.standard_normal(n)
    return Dataset(x, y, REGRESSION, 0, w)


def train_test_split(ds: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Every fifth position of a seeded permutation goes to the test set."""
    perm = stream(seed, "split").permutation(len(ds))
    pos = np.arange(len(ds))
    test = np.sort(perm[pos % 5 == 4])
    train = np.sort(perm[pos % 5 != 4])
    return ds.subset(train), ds.subset(test)


def batches(ds: Dataset | int, plan: BatchPlan, epoch: int) -> list[np.ndarray]:
    n = ds if isinstance(ds, int) else len(ds)
    plan.validate(n)
    perm = stream(plan.seed, "batches", epoch).permutation(n)
    stop = (n // plan.batch_size) * plan.batch_size if plan.drop_last else n
    return [perm[i : min(i + plan.batch_size, stop)] for i in range(0, stop, plan.batch_size)]


def save_csv(ds: Dataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(ds.n_features)] + ["label"])
        for row, label in zip(ds.x, ds.y):
            lab = str(int(label)) if ds.task == CLASSIFICATION else repr(float(label))
            w.writerow([repr(float(v)) for v in row] + [lab])


def load_csv(path: str | Path, task: str = CLASSIFICATION, n_classes: int | None = None) -> Dataset:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if not header or header[-1] != "label":
        raise ParameterError("CSV header must end with 'label'")
    x = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64).reshape(len(body), len(header) - 1)
    if task == CLASSIFICATION:
        y = np.array([int(r[-1]) for r in body], dtype=np.int64)
        k = n_classes if n_classes is not None else int(y.max()) + 1
        return Dataset(x, y, task, k)
    y = np.array([float(r[-1]) for r in body], dtype=np.float64)
    return Dataset(x, y, task)
