"""Cascade patch/head pruning engine for ViT-style encoders.

The engine runs a minimal transformer encoder on pre-embedded patch
sequences, predicts structured sparsity from attention probabilities
(cumulative column-max scores), schedules per-layer pruning ratios from the
sampled attention range, applies monotone cascade masks, and accounts the
FLOPs saved analytically.
"""

__version__ = "0.1.0"

from .encoder import (
    ConfigurationError,
    EncoderConfig,
    EncoderWeights,
    ForwardTrace,
    LayerWeights,
    forward,
    random_weights,
    record_attention,
)
from .flops import FlopsReport, layer_flops, report_from_counts
from .io_formats import (
    ArchiveError,
    load_archive,
    load_encoder,
    save_archive,
    save_encoder,
)
from .masks import CascadeMask, MaskError
from .pruner import (
    ABLATION_MODES,
    PruneOptions,
    PruneTrace,
    RunResult,
    prune_layer,
    run_ablation,
    run_cp_vit,
    run_segment_ablation,
)
from .scheduler import (
    RatioState,
    SchedulerParams,
    estimate_attention_range,
    head_ratio,
    next_ratio,
    params_for_target,
)
from .scoring import (
    CumulativeScores,
    accumulate,
    fast_scores,
    oracle_head_informativeness,
    oracle_layer_patch_informativeness,
    oracle_patch_informativeness,
    segment_patches,
)
from .tensor import (
    DimensionError,
    count_macs,
    gelu,
    layer_norm,
    masked_softmax_rows,
    matmul,
    softmax_rows,
)

__all__ = [
    "__version__",
    "ABLATION_MODES",
    "ArchiveError",
    "CascadeMask",
    "ConfigurationError",
    "CumulativeScores",
    "DimensionError",
    "EncoderConfig",
    "EncoderWeights",
    "FlopsReport",
    "ForwardTrace",
    "LayerWeights",
    "MaskError",
    "PruneOptions",
    "PruneTrace",
    "RatioState",
    "RunResult",
    "SchedulerParams",
    "accumulate",
    "count_macs",
    "estimate_attention_range",
    "fast_scores",
    "forward",
    "gelu",
    "head_ratio",
    "layer_flops",
    "layer_norm",
    "load_archive",
    "load_encoder",
    "masked_softmax_rows",
    "matmul",
    "next_ratio",
    "oracle_head_informativeness",
    "oracle_layer_patch_informativeness",
    "oracle_patch_informativeness",
    "params_for_target",
    "prune_layer",
    "random_weights",
    "record_attention",
    "report_from_counts",
    "run_ablation",
    "run_cp_vit",
    "run_segment_ablation",
    "save_archive",
    "save_encoder",
    "segment_patches",
    "softmax_rows",
]
