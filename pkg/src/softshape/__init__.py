"""Time-series classification with soft sparsified shapes.

Series are cut into overlapping windows, embedded, scored by a gated
attention head, softly sparsified (low-scored shapes fuse into one row), and
refined by top-k routed experts plus a shared multi-kernel convolutional
expert before attention-weighted pooling into class probabilities.
"""

from .attention import GatedAttentionHead
from .data import (
    Dataset,
    SplitSpec,
    TimeSeriesRecord,
    batch_size,
    impute_missing,
    load_ucr_tsv,
    prepare_dataset,
    split_merged,
    znormalize,
    znormalize_dataset,
)
from .embedding import ShapeEmbedding, count_shapes
from .estimator import SoftShapeClassifier
from .model import (
    EpochMetrics,
    SoftShapeNet,
    TrainConfig,
    block_row_counts,
    conjunctive_pool,
    cross_entropy,
    evaluate,
    load_checkpoint,
    predict_probabilities,
    save_checkpoint,
    select_shape_length,
    shape_length_candidates,
    total_loss,
    train,
)
from .moe import (
    ExpertSet,
    GateStats,
    IntraShapeMoe,
    TopKRouter,
    aux_losses,
    coefficient_of_variation,
    expert_mixture,
    route_topk,
)
from .shared_expert import SharedConvExpert
from .sparsify import SparsifiedShapes, keep_count, select_top_eta, sparsify

__all__ = [
    "Dataset",
    "EpochMetrics",
    "ExpertSet",
    "GateStats",
    "GatedAttentionHead",
    "IntraShapeMoe",
    "ShapeEmbedding",
    "SharedConvExpert",
    "SoftShapeClassifier",
    "SoftShapeNet",
    "SparsifiedShapes",
    "SplitSpec",
    "TimeSeriesRecord",
    "TopKRouter",
    "TrainConfig",
    "aux_losses",
    "batch_size",
    "block_row_counts",
    "coefficient_of_variation",
    "conjunctive_pool",
    "count_shapes",
    "cross_entropy",
    "evaluate",
    "expert_mixture",
    "impute_missing",
    "keep_count",
    "load_checkpoint",
    "load_ucr_tsv",
    "predict_probabilities",
    "prepare_dataset",
    "route_topk",
    "save_checkpoint",
    "select_shape_length",
    "select_top_eta",
    "shape_length_candidates",
    "sparsify",
    "split_merged",
    "total_loss",
    "train",
    "znormalize",
    "znormalize_dataset",
]

__version__ = "0.1.0"
