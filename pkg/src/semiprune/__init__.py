"""Semi-structured mask learning, rank-aware pruning and compaction for skeleton GCNs."""

from .errors import (
    DataError,
    DomainError,
    NumericError,
    ParameterError,
    SemiPruneError,
    ShapeError,
    StructureError,
    TrainingError,
    UsageError,
)
from .mask_param import GroupScheme, LatentLayer, MaskStack, band_stop, compose, gate, share
from .objectives import AnnealSchedule, LossWeights, surrogate_rank, total_loss
from .gcn import GcnModel, SkeletonSequence, TrajectoryGraph, init_model, temporal_chunking
from .trainer import Dataset, TrainConfig, finalize_masks, prune_report, train
from .compaction import BenchResult, GcnPlan, bench, compact_forward, plan_compaction
from .data import RunConfig, build_model, load_checkpoint, load_manifest, load_sequence, save_checkpoint, synth_dataset

__version__ = "0.1.0"
