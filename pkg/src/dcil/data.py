"""Dataset synthesis/loading, session splitting, and site partitioning.

A dataset is a plain container of train/test arrays.  Sessions carve the
label space into disjoint chunks (one base chunk plus T equal incremental
chunks); partitioners then spread one session's training data over M sites,
either class-balanced (IID) or Dirichlet-skewed.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .nncore import ConfigError, InputError, ParameterError

SeedLike = int | list[int] | tuple[int, ...]


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    n_classes: int
    input_dim: int


@dataclass
class SessionSplit:
    """Disjoint class chunks and their training data, plus a per-class test pool.

    `per_session_train` has T+1 entries; entry 0 is the base session.
    """

    base_classes: tuple[int, ...]
    session_classes: list[tuple[int, ...]]
    per_session_train: list[tuple[np.ndarray, np.ndarray]]
    test_pool: dict[int, np.ndarray]


@dataclass
class SitePartition:
    """One session's training data dealt to M disjoint site shards."""

    shards: list[tuple[np.ndarray, np.ndarray]]


def make_synthetic(
    n_classes: int, per_class: int, dim: int, spread: float, seed: SeedLike
) -> Dataset:
    """Gaussian blobs with class centers on the radius-3 sphere in R^dim.

    Deterministic per seed; 80/20 stratified train/test split.
    """
    if n_classes < 2 or per_class < 2 or dim < 2:
        raise ParameterError(
            f"degenerate dataset sizes: n_classes={n_classes}, per_class={per_class}, dim={dim}"
        )
    if spread < 0:
        raise ParameterError(f"spread must be >= 0, got {spread}")
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(n_classes, dim))
    centers = 3.0 * raw / np.linalg.norm(raw, axis=1, keepdims=True)
    n_train = int(round(0.8 * per_class))
    tr_x, tr_y, te_x, te_y = [], [], [], []
    for c in range(n_classes):
        pts = centers[c] + spread * rng.normal(size=(per_class, dim))
        tr_x.append(pts[:n_train])
        tr_y.append(np.full(n_train, c, dtype=np.int64))
        te_x.append(pts[n_train:])
        te_y.append(np.full(per_class - n_train, c, dtype=np.int64))
    return Dataset(
        np.concatenate(tr_x),
        np.concatenate(tr_y),
        np.concatenate(te_x),
        np.concatenate(te_y),
        n_classes,
        dim,
    )


def split_sessions(dataset: Dataset, n_base: int, n_sessions: int, seed: SeedLike) -> SessionSplit:
    """Seeded random split of the label space into base + T equal sessions."""
    c = dataset.n_classes
    if n_base < 1 or n_sessions < 1:
        raise ConfigError(f"n_base and n_sessions must be >= 1, got {n_base}, {n_sessions}")
    rest = c - n_base
    if rest <= 0 or rest % n_sessions != 0:
        raise ConfigError(
            f"cannot split {c} classes into {n_base} base + {n_sessions} equal sessions"
        )
    k = rest // n_sessions
    rng = np.random.default_rng(seed)
    order = rng.permutation(c)
    base = tuple(sorted(int(x) for x in order[:n_base]))
    sessions = [
        tuple(sorted(int(x) for x in order[n_base + t * k : n_base + (t + 1) * k]))
        for t in range(n_sessions)
    ]
    chunks = [base] + sessions
    per_session = []
    for chunk in chunks:
        mask = np.isin(dataset.train_y, chunk)
        per_session.append((dataset.train_x[mask], dataset.train_y[mask]))
    pool = {
        int(cls): dataset.test_x[dataset.test_y == cls] for cls in range(c)
    }
    return SessionSplit(base, sessions, per_session, pool)


def partition_iid(x: np.ndarray, y: np.ndarray, n_sites: int, seed: SeedLike) -> SitePartition:
    """Within each class, shuffle and deal examples round-robin to sites."""
    if n_sites < 1:
        raise ConfigError(f"n_sites must be >= 1, got {n_sites}")
    rng = np.random.default_rng(seed)
    buckets: list[list[np.ndarray]] = [[] for _ in range(n_sites)]
    for c in sorted(int(v) for v in np.unique(y)):
        idx = np.flatnonzero(y == c)
        if len(idx) < n_sites:
            raise ConfigError(
                f"class {c} has {len(idx)} examples, fewer than {n_sites} sites"
            )
        idx = rng.permutation(idx)
        for m in range(n_sites):
            buckets[m].append(idx[m::n_sites])
    shards = []
    for m in range(n_sites):
        take = np.concatenate(buckets[m])
        shards.append((x[take], y[take]))
    return SitePartition(shards)


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    raw = proportions * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition_dirichlet(
    x: np.ndarray, y: np.ndarray, n_sites: int, alpha: float, seed: SeedLike
) -> SitePartition:
    """Per-class Dirichlet(alpha) allocation of examples over sites.

    Fractional shares become integer counts by largest-remainder rounding, so
    shards are disjoint and exhaustive.  Small alpha concentrates each class
    on few sites; empty shards are allowed.
    """
    if alpha <= 0:
        raise ParameterError(f"alpha must be > 0, got {alpha}")
    if n_sites < 2:
        raise ConfigError(f"n_sites must be >= 2 for dirichlet partitioning, got {n_sites}")
    rng = np.random.default_rng(seed)
    buckets: list[list[np.ndarray]] = [[] for _ in range(n_sites)]
    for c in sorted(int(v) for v in np.unique(y)):
        idx = rng.permutation(np.flatnonzero(y == c))
        props = rng.dirichlet(np.full(n_sites, alpha))
        counts = _largest_remainder(props, len(idx))
        offset = 0
        for m in range(n_sites):
            buckets[m].append(idx[offset : offset + counts[m]])
            offset += counts[m]
    shards = []
    for m in range(n_sites):
        take = np.concatenate(buckets[m]) if buckets[m] else np.empty(0, dtype=np.int64)
        shards.append((x[take], y[take]))
    return SitePartition(shards)


# ---------------------------------------------------------------------------
# CIFAR-100 binary format
# ---------------------------------------------------------------------------

_CIFAR_RECORD = 2 + 3072  # coarse byte + fine byte + 32x32x3 pixels


def read_cifar100_file(path: str, pool_grid: int | None = None):
    """Parse one CIFAR-100 binary file into (x, fine_labels).

    Each record is 1 coarse-label byte, 1 fine-label byte and 3072 pixel
    bytes.  Pixels are scaled to [0, 1] and flattened; with `pool_grid` g the
    32x32 plane of each channel is mean-pooled to g x g (dim 3*g*g).
    """
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except OSError as exc:
        raise IOError(f"cannot read {path}: {exc}") from exc
    if len(raw) == 0:
        raise IOError(f"{path}: empty file at byte offset 0")
    if len(raw) % _CIFAR_RECORD != 0:
        raise IOError(
            f"{path}: truncated record at byte offset {len(raw) - len(raw) % _CIFAR_RECORD}"
        )
    records = raw.reshape(-1, _CIFAR_RECORD)
    fine = records[:, 1].astype(np.int64)
    pixels = records[:, 2:].astype(np.float64) / 255.0
    if pool_grid is not None:
        g = pool_grid
        if g < 1 or 32 % g != 0:
            raise ParameterError(f"pool_grid must divide 32, got {g}")
        s = 32 // g
        pixels = pixels.reshape(-1, 3, g, s, g, s).mean(axis=(3, 5)).reshape(-1, 3 * g * g)
    return pixels, fine


def load_cifar100(path: str, pool_grid: int | None = None) -> Dataset:
    """Load the standard CIFAR-100 binary train/test pair from a directory."""
    train_path = os.path.join(path, "train.bin")
    test_path = os.path.join(path, "test.bin")
    tr_x, tr_y = read_cifar100_file(train_path, pool_grid)
    te_x, te_y = read_cifar100_file(test_path, pool_grid)
    return Dataset(tr_x, tr_y, te_x, te_y, 100, tr_x.shape[1])


def examples_to_csv(x: np.ndarray, y: np.ndarray, path: str) -> None:
    """Write examples as CSV with header x_0..x_{d-1},y."""
    d = x.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x_{i}" for i in range(d)] + ["y"])
        for row, label in zip(x, y):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def examples_from_csv(path: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "y":
            raise InputError(f"{path}: unexpected CSV header")
        rows = list(reader)
    x = np.array([[float(v) for v in row[:-1]] for row in rows])
    y = np.array([int(row[-1]) for row in rows], dtype=np.int64)
    return x, y
