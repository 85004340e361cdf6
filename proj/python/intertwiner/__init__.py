"""Entropic transport divergence, class-representative buffers, intertwiner
losses, pyramid-level proposal assignment, and the synthetic compaction
harness, backed by the C++ core."""

from ._core import (
    AssignmentConfig,
    BufferStrategy,
    ClassBuffer,
    CompactionMetrics,
    FusionMode,
    InputSource,
    Metric,
    RunTrace,
    SinkhornConfig,
    SyntheticDataset,
    SyntheticDatasetSpec,
    TrainConfig,
    TransportPlan,
    assign_level,
    biased_sinkhorn,
    breakdown_report,
    compaction_metrics,
    cosine_distance,
    exact_ot_uniform,
    fuse_features,
    generate_synthetic,
    ground_cost,
    intertwiner_loss,
    kl_term,
    ot_gradient_wrt_features,
    roi_threshold,
    sinkhorn_divergence,
    sinkhorn_plan,
    total_loss,
    train_intertwiner,
)

__all__ = [
    "AssignmentConfig",
    "BufferStrategy",
    "ClassBuffer",
    "CompactionMetrics",
    "FusionMode",
    "InputSource",
    "Metric",
    "RunTrace",
    "SinkhornConfig",
    "SyntheticDataset",
    "SyntheticDatasetSpec",
    "TrainConfig",
    "TransportPlan",
    "assign_level",
    "biased_sinkhorn",
    "breakdown_report",
    "compaction_metrics",
    "cosine_distance",
    "exact_ot_uniform",
    "fuse_features",
    "generate_synthetic",
    "ground_cost",
    "intertwiner_loss",
    "kl_term",
    "ot_gradient_wrt_features",
    "roi_threshold",
    "sinkhorn_divergence",
    "sinkhorn_plan",
    "total_loss",
    "train_intertwiner",
]

__version__ = "0.1.0"
