"""Continual learning for fixed-capacity CNNs.

A multi-head CNN learns a sequence of classification tasks under two
competing pressures applied as per-filter proximal updates after each
SGD epoch: filters important for earlier tasks are pulled toward their
previously learned values, the rest are sparsified (group + exclusive
norms) so they can be recycled for future tasks.  Filter importance is
the spatial mean standard deviation of post-ReLU activations over a
task's training data, accumulated across tasks.
"""

from .data import (
    IdxStreamSpec,
    SyntheticStreamSpec,
    TaskDataset,
    TaskStream,
    build_stream,
    read_idx,
)
from .errors import (
    ConfigError,
    IngestionError,
    InputError,
    ShapeError,
    SparseclError,
    StateError,
)
from .harness import (
    ExperimentResult,
    MetricsMatrix,
    average_accuracy,
    average_forgetting,
    evaluate,
    retention_curve,
    run_experiment,
)
from .importance import (
    ActivationStats,
    ImportanceState,
    PruneReport,
    accumulate_importance,
    binarize,
    collect_stats,
    filter_importance,
    prune_and_reinit,
)
from .network import (
    ArchitectureSpec,
    FilterGroup,
    MultiHeadNetwork,
    add_head,
    build_network,
    filter_groups,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .optim import (
    OptimizerConfig,
    PlasticityTerm,
    ProxStepReport,
    StabilityTerm,
    prox_oracle,
    prox_plasticity_filter,
    prox_stability_filter,
    sgd_epoch,
    train_task,
)
from .penalties import (
    AnchorStore,
    FilterPartition,
    ObjectiveBreakdown,
    RegularizerConfig,
    plasticity_penalty,
    psi,
    stability_penalty,
    total_objective,
)
from .tensor import (
    Node,
    Tape,
    backward,
    conv2d,
    dense,
    flatten,
    maxpool2x2,
    relu,
    softmax_cross_entropy,
)

__version__ = "0.1.0"
