"""Session/round orchestration of the composite-distillation pipeline.

Runs the full protocol over T incremental sessions of R rounds each: local
incremental training at every site, mutual distillation against the ensemble
teacher, data-weighted parameter averaging, and a final distillation of the
ensemble into the averaged general model.  The baseline path skips both
distillation stages; a centralized reference learner retrains on all data
seen so far.  Every run is a pure function of its config and seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import data as data_mod
from .distillation import (
    EnsembleWeights,
    SharedDataset,
    build_shared_dataset,
    compute_logits_table,
    dad_refine,
    dcd_finetune,
    ensemble_logits,
    fedavg_aggregate,
)
from .local_learner import (
    AnchorSet,
    LocalLossConfig,
    SiteState,
    local_update,
    select_anchors_herding,
    update_anchor_set,
)
from .nncore import (
    CompositeLoss,
    ConfigError,
    CrossEntropyTerm,
    InputError,
    NetSpec,
    ParamVector,
    backward,
    expand_head,
    forward_batch,
    init_params,
    sgd_step,
)

METHODS = ("dcid", "dcil_fedavg", "dcil_fedmax", "dcil_fedprox", "centralized")
PARTITIONS = ("iid", "dirichlet")

# Seed-stream tags; every generator is derived structurally from
# (seed, tag, ...) so that independent stages never share a stream.
_S_DATA, _S_SPLIT, _S_INIT, _S_BASE, _S_PART, _S_SHARED = 1, 2, 3, 4, 5, 6
_S_SITE, _S_DCD, _S_DAD, _S_CENT = 7, 8, 9, 10


@dataclass(frozen=True)
class RunConfig:
    """Full description of one experiment run.

    Defaults are the desk-scale synthetic benchmark: 20 classes in 16
    dimensions, 10 base classes plus 5 sessions of 2, 5 sites, 3 rounds.
    """

    method: str = "dcid"
    seed: int = 0
    n_sites: int = 5
    n_sessions: int = 5
    rounds: int = 3
    hidden_dims: tuple[int, ...] = (32, 32)
    activation: str = "relu"
    # synthetic dataset
    n_classes: int = 20
    per_class: int = 60
    input_dim: int = 16
    spread: float = 1.0
    n_base: int = 10
    # base-session training
    base_epochs: int = 30
    base_lr: float = 0.1
    # local training
    local: LocalLossConfig = field(default_factory=LocalLossConfig)
    # distillation stages: mutual fine-tuning of the local models (gentle,
    # to preserve local diversity) and refinement of the averaged model
    # against the ensemble teacher (the main accuracy lever).
    tau1: float = 5.0
    tau2: float = 5.0
    shared_per_class: int = 20
    dcd_lr: float = 1e-4
    dcd_epochs: int = 5
    dad_lr: float = 1.0
    dad_epochs: int = 300
    # anchors
    anchors_per_class: int = 20
    # partitioning
    partition: str = "dirichlet"
    alpha: float = 0.1

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.partition not in PARTITIONS:
            raise ConfigError(f"unknown partition {self.partition!r}")
        if self.n_sites < 1 or self.n_sessions < 1 or self.rounds < 1:
            raise ConfigError("n_sites, n_sessions and rounds must all be >= 1")
        if self.n_base < 1:
            raise ConfigError("n_base must be >= 1")
        rest = self.n_classes - self.n_base
        if rest <= 0 or rest % self.n_sessions != 0:
            raise ConfigError(
                f"{self.n_classes} classes cannot form {self.n_base} base + "
                f"{self.n_sessions} equal sessions"
            )
        if self.shared_per_class < 0 or self.anchors_per_class < 0:
            raise ConfigError("shared_per_class and anchors_per_class must be >= 0")
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise ConfigError("distillation temperatures must be > 0")
        if self.dcd_lr < 0 or self.dad_lr < 0:
            raise ConfigError("distillation learning rates must be >= 0")
        if self.dcd_epochs < 0 or self.dad_epochs < 0:
            raise ConfigError("distillation epoch counts must be >= 0")
        if self.alpha <= 0:
            raise ConfigError("alpha must be > 0")
        # LocalLossConfig validates itself on construction.
        NetSpec(self.input_dim, self.hidden_dims, self.n_base, self.activation)

    def variant(self) -> str:
        return {
            "dcid": "dcid",
            "dcil_fedavg": "fedavg",
            "dcil_fedmax": "fedmax",
            "dcil_fedprox": "fedprox",
            "centralized": "fedavg",
        }[self.method]


@dataclass
class CommLedger:
    """Cumulative per-session communication counters."""

    params_up: int = 0
    params_down: int = 0
    shared_samples: int = 0
    logit_scalars: int = 0

    def snapshot(self) -> dict:
        return {
            "params_up": self.params_up,
            "params_down": self.params_down,
            "shared_samples": self.shared_samples,
            "logit_scalars": self.logit_scalars,
        }


@dataclass
class MetricsRecord:
    session: int
    accuracy: float
    per_class: dict[int, float]
    seen_classes: tuple[int, ...]
    comm: dict

    def to_dict(self) -> dict:
        return {
            "session": self.session,
            "accuracy": self.accuracy,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "seen_classes": list(self.seen_classes),
            "comm": self.comm,
        }


@dataclass
class RunResult:
    records: list[MetricsRecord]
    trace: list[tuple[int, int, str]]  # (session, round, step)
    config: RunConfig


def evaluate(params: ParamVector, test_pool: dict[int, np.ndarray], seen_classes):
    """Top-1 accuracy over the seen-class logits, plus a per-class map.

    Classes are head indices here; prediction argmax ties break toward the
    lowest class id.
    """
    seen = sorted(int(c) for c in seen_classes)
    if not seen:
        raise InputError("no seen classes to evaluate")
    xs, ys = [], []
    for c in seen:
        pool = test_pool.get(c)
        if pool is None or len(pool) == 0:
            continue
        xs.append(pool)
        ys.append(np.full(len(pool), c, dtype=np.int64))
    if not xs:
        raise InputError("empty test pool for the seen classes")
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    _, logits = forward_batch(params, x)
    sub = logits[:, seen]
    pred = np.array(seen)[np.argmax(sub, axis=1)]
    correct = pred == y
    per_class = {
        c: float(correct[y == c].mean()) for c in seen if np.any(y == c)
    }
    return float(correct.mean()), per_class


def summarize(records: list[MetricsRecord]) -> dict:
    """Mean accuracy over all session records, plus the last session's."""
    if not records:
        raise InputError("no records to summarize")
    accs = [r.accuracy for r in records]
    return {
        "average_accuracy": float(np.mean(accs)),
        "final_accuracy": accs[-1],
    }


# ---------------------------------------------------------------------------
# Internal helpers
# ---------------------------------------------------------------------------


def _train_plain(params, x, y, epochs, lr, batch_size, rng):
    """Plain minibatch-SGD cross-entropy training."""
    n = len(x)
    out = params.copy()
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            sel = order[start : start + batch_size]
            _, grad = backward(out, CompositeLoss((CrossEntropyTerm(x[sel], y[sel]),)))
            if lr > 0:
                out = sgd_step(out, grad, lr)
    return out


class _Bench:
    """Dataset, session split and label remap shared by all methods of a run.

    Labels are remapped so that head indices are contiguous in encounter
    order: base classes first, then each session's classes.
    """

    def __init__(self, cfg: RunConfig):
        ds = data_mod.make_synthetic(
            cfg.n_classes, cfg.per_class, cfg.input_dim, cfg.spread, [cfg.seed, _S_DATA]
        )
        split = data_mod.split_sessions(ds, cfg.n_base, cfg.n_sessions, [cfg.seed, _S_SPLIT])
        order = list(split.base_classes)
        for chunk in split.session_classes:
            order.extend(chunk)
        remap = {orig: new for new, orig in enumerate(order)}
        self.session_train = []
        for x, y in split.per_session_train:
            self.session_train.append(
                (x, np.array([remap[int(v)] for v in y], dtype=np.int64))
            )
        self.test_pool = {remap[c]: pool for c, pool in split.test_pool.items()}
        self.session_classes = []  # head-index chunks, [0] = base
        self.session_classes.append(tuple(range(cfg.n_base)))
        k = (cfg.n_classes - cfg.n_base) // cfg.n_sessions
        for t in range(cfg.n_sessions):
            lo = cfg.n_base + t * k
            self.session_classes.append(tuple(range(lo, lo + k)))

    def seen(self, session: int) -> tuple[int, ...]:
        out: list[int] = []
        for chunk in self.session_classes[: session + 1]:
            out.extend(chunk)
        return tuple(out)


def _train_base(cfg: RunConfig, bench: _Bench) -> ParamVector:
    spec = NetSpec(cfg.input_dim, cfg.hidden_dims, cfg.n_base, cfg.activation)
    params = init_params(spec, np.random.default_rng([cfg.seed, _S_INIT]))
    x, y = bench.session_train[0]
    return _train_plain(
        params, x, y, cfg.base_epochs, cfg.base_lr,
        cfg.local.batch_size, np.random.default_rng([cfg.seed, _S_BASE]),
    )


def _partition(cfg: RunConfig, x, y, session):
    seed = [cfg.seed, _S_PART, session]
    if cfg.partition == "iid":
        return data_mod.partition_iid(x, y, cfg.n_sites, seed)
    return data_mod.partition_dirichlet(x, y, cfg.n_sites, cfg.alpha, seed)


def _record(session, params, bench, ledger) -> MetricsRecord:
    acc, per_class = evaluate(params, bench.test_pool, bench.seen(session))
    return MetricsRecord(session, acc, per_class, bench.seen(session), ledger.snapshot())


def _herd_session_anchors(cfg, params, shard_x, shard_y, classes) -> AnchorSet:
    picked: dict[int, np.ndarray] = {}
    if cfg.anchors_per_class < 1:
        return AnchorSet(picked)
    for c in classes:
        mask = shard_y == c
        if not mask.any():
            continue
        examples = shard_x[mask]
        idx = select_anchors_herding(params, examples, cfg.anchors_per_class)
        picked[int(c)] = examples[idx]
    return AnchorSet(picked)


# ---------------------------------------------------------------------------
# Run entry points
# ---------------------------------------------------------------------------


def run_dcid(config: RunConfig) -> RunResult:
    if config.method != "dcid":
        raise ConfigError(f"run_dcid requires method 'dcid', got {config.method!r}")
    return _run_decentralized(config, with_distillation=True)


def run_baseline(config: RunConfig) -> RunResult:
    if config.method not in ("dcil_fedavg", "dcil_fedmax", "dcil_fedprox"):
        raise ConfigError(f"run_baseline cannot handle method {config.method!r}")
    return _run_decentralized(config, with_distillation=False)


def _run_decentralized(config: RunConfig, with_distillation: bool) -> RunResult:
    config.validate()
    cfg = config
    local_cfg = replace(cfg.local, variant=cfg.variant())
    bench = _Bench(cfg)
    trace: list[tuple[int, int, str]] = []
    records: list[MetricsRecord] = []

    general = _train_base(cfg, bench)
    records.append(_record(0, general, bench, CommLedger()))

    sites = [
        SiteState(m, np.empty((0, cfg.input_dim)), np.empty(0, dtype=np.int64),
                  AnchorSet(), None, (cfg.seed, _S_SITE, m))
        for m in range(cfg.n_sites)
    ]

    # Base-class anchors: the base session is trained centrally, but each site
    # must enter session 1 with anchors for the classes already seen.  Deal
    # the base data to sites with the configured partitioner and herd with
    # the base model.
    base_x, base_y = bench.session_train[0]
    base_partition = _partition(cfg, base_x, base_y, 0)
    for m, (sx, sy) in enumerate(base_partition.shards):
        sites[m].anchors = _herd_session_anchors(
            cfg, general, sx, sy, bench.session_classes[0]
        )

    for t in range(1, cfg.n_sessions + 1):
        prev_general = general
        new_classes = bench.session_classes[t]
        general = expand_head(general, len(new_classes))
        ledger = CommLedger()
        p_count = general.spec.param_count
        n_head = general.spec.n_classes

        x_t, y_t = bench.session_train[t]
        partition = _partition(cfg, x_t, y_t, t)
        for m, (sx, sy) in enumerate(partition.shards):
            sites[m].shard_x = sx
            sites[m].shard_y = sy
        counts = [len(s.shard_x) for s in sites]

        if with_distillation:
            shared = build_shared_dataset(
                partition.shards, cfg.shared_per_class, new_classes,
                [cfg.seed, _S_SHARED, t],
            )
        else:
            shared = SharedDataset(np.empty((0, cfg.input_dim)), np.empty(0, dtype=np.int64))
        ledger.shared_samples += len(shared)

        weights = EnsembleWeights.from_counts(counts)
        round_anchors: list[AnchorSet] = [AnchorSet() for _ in sites]

        for r in range(cfg.rounds):
            trace.append((t, r, "distribute"))
            ledger.params_down += cfg.n_sites * p_count

            theta0: list[ParamVector] = []
            for site in sites:
                theta0.append(
                    local_update(
                        site, general, local_cfg,
                        old_general=prev_general, session=t, round_idx=r,
                    )
                )
            trace.append((t, r, "did"))

            if with_distillation:
                tables0 = [
                    compute_logits_table(p, shared, f"site{m}:pre")
                    for m, p in enumerate(theta0)
                ]
                ledger.logit_scalars += cfg.n_sites * len(shared) * n_head
                trace.append((t, r, "local_outputs"))

            round_anchors = [
                _herd_session_anchors(cfg, theta0[m], s.shard_x, s.shard_y, new_classes)
                for m, s in enumerate(sites)
            ]
            trace.append((t, r, "anchors"))

            if with_distillation:
                ensemble0 = ensemble_logits(tables0, weights)
                trace.append((t, r, "ensemble"))
                theta1 = [
                    dcd_finetune(
                        p, ensemble0, shared, cfg.tau1, cfg.dcd_lr,
                        cfg.dcd_epochs, seed=[cfg.seed, _S_DCD, t, r, m],
                    )
                    for m, p in enumerate(theta0)
                ]
                trace.append((t, r, "dcd"))
            else:
                theta1 = theta0

            ledger.params_up += cfg.n_sites * p_count
            aggregated = fedavg_aggregate(theta1, counts)
            trace.append((t, r, "fedavg"))

            if with_distillation:
                tables1 = [
                    compute_logits_table(p, shared, f"site{m}:post")
                    for m, p in enumerate(theta1)
                ]
                ledger.logit_scalars += cfg.n_sites * len(shared) * n_head
                trace.append((t, r, "local_outputs"))
                ensemble1 = ensemble_logits(tables1, weights)
                trace.append((t, r, "ensemble"))
                general = dad_refine(
                    aggregated, ensemble1, shared, cfg.tau2, cfg.dad_lr,
                    cfg.dad_epochs, seed=[cfg.seed, _S_DAD, t, r],
                )
                trace.append((t, r, "dad"))
            else:
                general = aggregated

        for m, site in enumerate(sites):
            if len(round_anchors[m].per_class):
                site.anchors = update_anchor_set(site.anchors, round_anchors[m])

        records.append(_record(t, general, bench, ledger))

    return RunResult(records, trace, cfg)


def run_centralized(config: RunConfig) -> RunResult:
    """Upper-bound reference: full retraining on all data seen so far."""
    config.validate()
    cfg = config
    if cfg.method != "centralized":
        raise ConfigError(f"run_centralized requires method 'centralized', got {cfg.method!r}")
    bench = _Bench(cfg)
    records = [
        _record(0, _train_base(cfg, bench), bench, CommLedger())
    ]
    for t in range(1, cfg.n_sessions + 1):
        seen = bench.seen(t)
        spec = NetSpec(cfg.input_dim, cfg.hidden_dims, len(seen), cfg.activation)
        params = init_params(spec, np.random.default_rng([cfg.seed, _S_CENT, t]))
        x = np.concatenate([bench.session_train[s][0] for s in range(t + 1)])
        y = np.concatenate([bench.session_train[s][1] for s in range(t + 1)])
        params = _train_plain(
            params, x, y, cfg.base_epochs, cfg.base_lr, cfg.local.batch_size,
            np.random.default_rng([cfg.seed, _S_CENT, t, 1]),
        )
        records.append(_record(t, params, bench, CommLedger()))
    return RunResult(records, [], cfg)


def run(config: RunConfig) -> RunResult:
    config.validate()
    if config.method == "dcid":
        return run_dcid(config)
    if config.method == "centralized":
        return run_centralized(config)
    return run_baseline(config)
