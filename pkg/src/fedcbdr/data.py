"""Datasets, class-incremental task splits and Dirichlet client partitions."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


class IdxFileMissing(DataError, FileNotFoundError):
    pass


class IdxBadMagic(DataError):
    pass


class IdxCountMismatch(DataError):
    pass


@dataclass
class Dataset:
    X: np.ndarray  # (n, d_in)
    y: np.ndarray  # (n,) int
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or len(self.X) == 0:
            raise DataError("dataset must be a non-empty 2-D feature array")
        if len(self.y) != len(self.X):
            raise DataError("features and labels differ in length")
        if self.y.min() < 0 or self.y.max() >= self.num_classes:
            raise DataError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def d_in(self) -> int:
        return self.X.shape[1]

    def indices_of(self, classes) -> np.ndarray:
        return np.flatnonzero(np.isin(self.y, list(classes)))


@dataclass(frozen=True)
class TaskSplit:
    task_classes: tuple[tuple[int, ...], ...]

    def __len__(self) -> int:
        return len(self.task_classes)

    def task_of(self, cls: int) -> int:
        for t, classes in enumerate(self.task_classes):
            if cls in classes:
                return t
        raise KeyError(cls)


@dataclass
class Partition:
    client_indices: list[np.ndarray]
    resamples: int = 0

    @property
    def num_clients(self) -> int:
        return len(self.client_indices)


def generate_synthetic(num_classes: int, per_class: int, d_in: int, spread: float,
                       seed: int) -> tuple[Dataset, Dataset]:
    """Gaussian-mixture train/test pair.

    Each class gets a random unit direction scaled to norm 3.0 as its mean;
    samples add isotropic noise with standard deviation ``spread``. The test
    split carries ``ceil(per_class / 5)`` samples per class.
    """
    if num_classes < 2 or per_class < 2 or d_in < 2:
        raise DataError("need num_classes >= 2, per_class >= 2, d_in >= 2")
    if not spread > 0:
        raise DataError(f"spread must be positive, got {spread}")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, d_in))
    means *= 3.0 / np.linalg.norm(means, axis=1, keepdims=True)

    def draw(count):
        y = np.repeat(np.arange(num_classes), count)
        X = means[y] + spread * rng.standard_normal((len(y), d_in))
        return X, y

    Xtr, ytr = draw(per_class)
    Xte, yte = draw(math.ceil(per_class / 5))
    return (Dataset(Xtr, ytr, num_classes, "train"),
            Dataset(Xte, yte, num_classes, "test"))


def _read_idx(path: Path, magic: int) -> tuple[tuple[int, ...], bytes]:
    path = Path(path)
    if not path.is_file():
        raise IdxFileMissing(f"IDX file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 4:
        raise IdxBadMagic(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise IdxBadMagic(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxBadMagic(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    body = raw[header:]
    if len(body) != math.prod(dims):
        raise IdxCountMismatch(f"{path}: body holds {len(body)} bytes, header declares {dims}")
    return dims, body


def load_idx(images_path, labels_path) -> Dataset:
    """Load an MNIST-format IDX image/label pair; pixels are scaled to [0, 1]."""
    idims, ibody = _read_idx(images_path, IDX_IMAGES_MAGIC)
    ldims, lbody = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if idims[0] != ldims[0]:
        raise IdxCountMismatch(f"images header declares {idims[0]} items, labels {ldims[0]}")
    n = idims[0]
    X = np.frombuffer(ibody, dtype=np.uint8).reshape(n, -1).astype(np.float64) / 255.0
    y = np.frombuffer(lbody, dtype=np.uint8).astype(np.int64)
    return Dataset(X, y, int(y.max()) + 1 if n else 0)


def split_tasks(num_classes: int, num_tasks: int, seed: int) -> TaskSplit:
    if num_tasks < 1 or num_classes < 1 or num_classes % num_tasks:
        raise DataError(f"{num_tasks} tasks do not evenly divide {num_classes} classes")
    order = np.random.default_rng(seed).permutation(num_classes)
    size = num_classes // num_tasks
    return TaskSplit(tuple(tuple(int(c) for c in order[i:i + size])
                           for i in range(0, num_classes, size)))


def largest_remainder(proportions: np.ndarray, total: int, rng: np.random.Generator) -> np.ndarray:
    """Round ``proportions * total`` to integers summing to ``total``.

    Ties among equal fractional parts are broken in random order.
    """
    exact = proportions * total
    counts = np.floor(exact).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        frac = exact - counts
        jitter = rng.permutation(len(frac))
        order = np.lexsort((jitter, -frac))
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(dataset: Dataset, task, num_clients: int, beta: float,
                        seed: int, max_attempts: int = 1000) -> Partition:
    """Split the samples of ``task``'s classes over clients, per class by Dirichlet(beta).

    Redraws with a derived seed until every client holds at least one sample.
    """
    classes = sorted(int(c) for c in task)
    if not classes:
        raise DataError("task has no classes")
    if num_clients < 2:
        raise DataError("need at least two clients")
    if not beta > 0:
        raise DataError(f"beta must be positive, got {beta}")
    per_class = [np.flatnonzero(dataset.y == c) for c in classes]
    if any(len(ix) == 0 for ix in per_class):
        raise DataError("task class absent from dataset")
    if sum(map(len, per_class)) < num_clients:
        raise DataError("fewer task samples than clients")

    for attempt in range(max_attempts):
        rng = np.random.default_rng([seed, attempt])
        shards: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
        for ix in per_class:
            ix = rng.permutation(ix)
            props = rng.dirichlet(np.full(num_clients, beta))
            counts = largest_remainder(props, len(ix), rng)
            for k, part in enumerate(np.split(ix, np.cumsum(counts)[:-1])):
                shards[k].append(part)
        clients = [np.sort(np.concatenate(s)) for s in shards]
        if all(len(c) for c in clients):
            if attempt:
                log.info("dirichlet partition resampled %d time(s) (beta=%g)", attempt, beta)
            return Partition(clients, resamples=attempt)
    raise DataError(f"no partition without empty clients after {max_attempts} draws")


def label_entropy(labels: np.ndarray) -> float:
    _, counts = np.unique(labels, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def mean_client_entropy(dataset: Dataset, partition: Partition) -> float:
    return float(np.mean([label_entropy(dataset.y[ix]) for ix in partition.client_indices]))
