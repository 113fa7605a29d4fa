"""Desk-scale simulator of decentralized class-incremental learning."""

from .nncore import (
    CompositeLoss,
    ConfigError,
    CrossEntropyTerm,
    DistillTerm,
    ForwardResult,
    InputError,
    NetSpec,
    ParamVector,
    ParameterError,
    ProximalTerm,
    UniformActivationTerm,
    backward,
    cross_entropy,
    expand_head,
    forward,
    forward_batch,
    init_params,
    kl_div,
    sgd_step,
    softmax_t,
)
from .data import (
    Dataset,
    SessionSplit,
    SitePartition,
    load_cifar100,
    make_synthetic,
    partition_dirichlet,
    partition_iid,
    split_sessions,
)
from .local_learner import (
    AnchorSet,
    LocalLossConfig,
    SiteState,
    anchor_loss,
    fedmax_regularizer,
    fedprox_term,
    local_update,
    select_anchors_herding,
    update_anchor_set,
)
from .distillation import (
    EnsembleWeights,
    LogitsTable,
    SharedDataset,
    build_shared_dataset,
    dad_refine,
    dcd_finetune,
    ensemble_logits,
    fedavg_aggregate,
)
from .orchestrator import (
    CommLedger,
    MetricsRecord,
    RunConfig,
    RunResult,
    evaluate,
    run,
    run_baseline,
    run_centralized,
    run_dcid,
    summarize,
)

__version__ = "0.1.0"
