"""Metric learning by alternating approximate projections onto
proximity constraint sets, with representative-based batches and hard
negative class mining.  Pure numpy engine plus a scikit-learn style
estimator facade and a text-file CLI."""

__version__ = "0.1.0"

from .datakit import Dataset, gen_synthetic, load, save, zero_shot_split
from .estimator import ProfsEmbedder
from .evalmetrics import (
    EvalReport,
    evaluate_embeddings,
    kmeans,
    nmi,
    pairwise_f1,
    recall_at_k,
)
from .feasibility import (
    ConstraintSpec,
    FeasibilityReport,
    check_full,
    check_relaxed,
    proposition1_epsilons,
    verify_proposition1,
)
from .losses import (
    MarginParams,
    ProjectionLossParams,
    TupleSet,
    aggregate,
    contrastive_term,
    generic_regularized,
    margin_term,
    projection_objective,
    triplet_term,
)
from .numcore import (
    MlpSpec,
    ParamVector,
    distance_matrix,
    embed,
    embed_batch,
    gradient,
    init_params,
    pairwise_distance,
    param_axpy,
    param_sqnorm_diff,
)
from .optimizer import AdamState, adam_step, sgd_step
from .sampling import (
    BatchPlan,
    ClassIndex,
    RepCache,
    RepresentativeSet,
    build_batch,
    cache_update,
    derive_M,
    hard_pair_mine,
    hncm_select,
    sample_representatives,
)
from .scheduler import (
    OptimizerConfig,
    ScheduleConfig,
    TrainState,
    anchor_displacement,
    load_checkpoint,
    run_conventional,
    run_projection,
    run_training,
    save_checkpoint,
)

__all__ = [
    "__version__",
    "Dataset",
    "gen_synthetic",
    "load",
    "save",
    "zero_shot_split",
    "ProfsEmbedder",
    "EvalReport",
    "evaluate_embeddings",
    "kmeans",
    "nmi",
    "pairwise_f1",
    "recall_at_k",
    "ConstraintSpec",
    "FeasibilityReport",
    "check_full",
    "check_relaxed",
    "proposition1_epsilons",
    "verify_proposition1",
    "MarginParams",
    "ProjectionLossParams",
    "TupleSet",
    "aggregate",
    "contrastive_term",
    "generic_regularized",
    "margin_term",
    "projection_objective",
    "triplet_term",
    "MlpSpec",
    "ParamVector",
    "distance_matrix",
    "embed",
    "embed_batch",
    "gradient",
    "init_params",
    "pairwise_distance",
    "param_axpy",
    "param_sqnorm_diff",
    "AdamState",
    "adam_step",
    "sgd_step",
    "BatchPlan",
    "ClassIndex",
    "RepCache",
    "RepresentativeSet",
    "build_batch",
    "cache_update",
    "derive_M",
    "hard_pair_mine",
    "hncm_select",
    "sample_representatives",
    "OptimizerConfig",
    "ScheduleConfig",
    "TrainState",
    "anchor_displacement",
    "load_checkpoint",
    "run_conventional",
    "run_projection",
    "run_training",
    "save_checkpoint",
]
