"""Shared-dataset distillation and aggregation: the DCD and DAD stages.

The shared dataset is a small pool of unlabeled samples contributed by all
sites.  Local models publish logits tables over it; a weighted ensemble of
those tables acts as the teacher both for mutual fine-tuning of the local
models (DCD) and for refining the FedAvg-aggregated general model (DAD).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .nncore import (
    CompositeLoss,
    ConfigError,
    DistillTerm,
    InputError,
    ParamVector,
    ParameterError,
    backward,
    forward_batch,
    kl_div,
    sgd_step,
    softmax_t,
)

DISTILL_FULL_BATCH_LIMIT = 256
DISTILL_BATCH = 128


@dataclass
class SharedDataset:
    """Unlabeled sample pool; provenance is bookkeeping only, never a loss input."""

    samples: np.ndarray
    provenance: np.ndarray

    def __post_init__(self):
        if len(self.samples) != len(self.provenance):
            raise InputError("provenance length must match sample count")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class LogitsTable:
    """Per-sample pre-softmax outputs of one model over the shared pool."""

    rows: np.ndarray
    source: str

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"z_{i}" for i in range(self.rows.shape[1])])
            for row in self.rows:
                writer.writerow([repr(float(v)) for v in row])


@dataclass
class EnsembleWeights:
    omega: np.ndarray

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.float64)
        if np.any(self.omega < 0):
            raise InputError("ensemble weights must be nonnegative")
        if abs(self.omega.sum() - 1.0) > 1e-12:
            raise InputError(f"ensemble weights sum to {self.omega.sum()}, not 1")

    @classmethod
    def from_counts(cls, counts) -> "EnsembleWeights":
        """Data-proportional weights; uniform when no site holds any data."""
        counts = np.asarray(counts, dtype=np.float64)
        total = counts.sum()
        if total <= 0:
            return cls(np.full(len(counts), 1.0 / len(counts)))
        return cls(counts / total)


def build_shared_dataset(
    shards: list[tuple[np.ndarray, np.ndarray]],
    per_class_count: int,
    classes,
    seed,
) -> SharedDataset:
    """Draw `per_class_count` unlabeled samples per new class across sites.

    Samples are drawn seeded from the pooled holdings of each class, so the
    draw is proportional to holdings; labels are discarded here and never
    stored.  Classes with fewer samples contribute all they have.
    """
    if per_class_count < 0:
        raise ParameterError(f"per_class_count must be >= 0, got {per_class_count}")
    rng = np.random.default_rng(seed)
    dim = shards[0][0].shape[1] if shards and shards[0][0].ndim == 2 else 0
    samples, provenance = [], []
    for c in sorted(int(v) for v in classes):
        pool_x, pool_site = [], []
        for m, (sx, sy) in enumerate(shards):
            mask = sy == c
            if mask.any():
                pool_x.append(sx[mask])
                pool_site.append(np.full(int(mask.sum()), m, dtype=np.int64))
        if not pool_x or per_class_count == 0:
            continue
        pool_x = np.concatenate(pool_x)
        pool_site = np.concatenate(pool_site)
        n_take = min(per_class_count, len(pool_x))
        take = np.sort(rng.choice(len(pool_x), size=n_take, replace=False))
        samples.append(pool_x[take])
        provenance.append(pool_site[take])
    if not samples:
        return SharedDataset(np.empty((0, dim)), np.empty(0, dtype=np.int64))
    return SharedDataset(np.concatenate(samples), np.concatenate(provenance))


def compute_logits_table(params: ParamVector, shared: SharedDataset, source: str = "") -> LogitsTable:
    if len(shared) == 0:
        return LogitsTable(np.empty((0, params.spec.n_classes)), source)
    _, logits = forward_batch(params, shared.samples)
    return LogitsTable(logits, source)


def ensemble_logits(tables: list[LogitsTable], weights: EnsembleWeights) -> LogitsTable:
    """Rowwise weighted sum of the local logits tables."""
    if len(tables) != len(weights.omega):
        raise InputError(f"{len(tables)} tables but {len(weights.omega)} weights")
    shape = tables[0].rows.shape
    if any(t.rows.shape != shape for t in tables):
        raise InputError("logits tables have mismatched shapes")
    rows = np.zeros(shape)
    for w, t in zip(weights.omega, tables):
        rows += w * t.rows
    return LogitsTable(rows, "ensemble")


def distill_loss(
    params: ParamVector, teacher: LogitsTable, shared: SharedDataset, tau: float
) -> float:
    """Sum over the shared pool of KL(softened teacher || softened student)."""
    if len(shared) == 0:
        return 0.0
    p = softmax_t(teacher.rows, tau)
    _, logits = forward_batch(params, shared.samples)
    q = softmax_t(logits, tau)
    return float(sum(kl_div(p[i], q[i]) for i in range(len(p))))


def _distill_sgd(
    params: ParamVector,
    teacher_rows: np.ndarray,
    samples: np.ndarray,
    tau: float,
    lr: float,
    epochs: int,
    rng: np.random.Generator,
) -> ParamVector:
    """Seeded minibatch descent on the distillation loss.

    Steps use the mean per-sample gradient so the step size does not scale
    with the pool size; small pools then get the same per-sample pull as
    large ones, which is what makes accuracy saturate in the pool size.
    """
    if tau <= 0:
        raise ParameterError(f"temperature must be > 0, got {tau}")
    teacher_probs = softmax_t(teacher_rows, tau)
    n = len(samples)
    batch = n if n <= DISTILL_FULL_BATCH_LIMIT else DISTILL_BATCH
    out = params.copy()
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            sel = order[start : start + batch]
            term = DistillTerm(
                samples[sel], teacher_probs[sel], tau, reduction="mean"
            )
            _, grad = backward(out, CompositeLoss((term,)))
            out = sgd_step(out, grad, lr)
    return out


def dcd_finetune(
    site_params: ParamVector,
    teacher: LogitsTable,
    shared: SharedDataset,
    tau1: float = 5.0,
    lr: float = 1e-4,
    epochs: int = 5,
    seed=0,
) -> ParamVector:
    """Fine-tune one local model against the ensemble teacher over the shared pool.

    Only the distillation loss is minimized here; the shared pool carries no
    labels.  An empty pool returns the input parameters unchanged.
    """
    if len(shared) == 0:
        return site_params.copy()
    if teacher.rows.shape[0] != len(shared):
        raise InputError("teacher row count must match the shared pool")
    rng = np.random.default_rng(seed)
    return _distill_sgd(site_params, teacher.rows, shared.samples, tau1, lr, epochs, rng)


def dad_refine(
    init_general: ParamVector,
    teacher: LogitsTable,
    shared: SharedDataset,
    tau2: float = 5.0,
    lr: float = 1e-4,
    epochs: int = 5,
    seed=0,
) -> ParamVector:
    """Distill the post-DCD ensemble into the FedAvg-initialized general model.

    Shared samples (with teacher rows) are reshuffled each epoch, seeded.
    With an empty pool the result is exactly the FedAvg model.
    """
    if len(shared) == 0:
        return init_general.copy()
    if teacher.rows.shape[0] != len(shared):
        raise InputError("teacher row count must match the shared pool")
    rng = np.random.default_rng(seed)
    return _distill_sgd(init_general, teacher.rows, shared.samples, tau2, lr, epochs, rng)


def fedavg_aggregate(param_list: list[ParamVector], sample_counts) -> ParamVector:
    """Elementwise weighted mean of local parameters with weights N_m / N."""
    if not param_list:
        raise InputError("no parameters to aggregate")
    spec = param_list[0].spec
    if any(p.spec != spec for p in param_list):
        raise InputError("cannot aggregate parameters with different specs")
    counts = np.asarray(sample_counts, dtype=np.float64)
    if len(counts) != len(param_list):
        raise InputError("one sample count per model is required")
    if np.any(counts < 0):
        raise InputError("sample counts must be nonnegative")
    total = counts.sum()
    if total <= 0:
        raise ConfigError("cannot aggregate with all-zero sample counts")
    if all(np.array_equal(p.values, param_list[0].values) for p in param_list[1:]):
        # identical inputs average to themselves; skip the weighted sum so
        # the result is bit-exact rather than within rounding error
        return param_list[0].copy()
    acc = np.zeros(spec.param_count)
    for c, p in zip(counts, param_list):
        acc += (c / total) * p.values
    return ParamVector(acc, spec)
