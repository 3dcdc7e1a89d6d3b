"""Diversity-aware context selection with determinantal point processes."""

from ._backend import NAME as BACKEND
from .adapter import AdapterParams, adapter_backward, adapter_forward, init_params, load_params, save_params
from .kernel import (
    EMPTY_DET,
    build_kernel,
    det_submatrix,
    dpp_probability,
    fuse_quality,
    normalize_rows,
    partition_check,
    quality_from_scores,
)
from .map_infer import GreedyConfig, SelectionResult, conditional_gain, exact_map, greedy_map
from .objective import (
    LossConfig,
    OptimState,
    TrainingExample,
    adam_step,
    det_gradient,
    dml_raw,
    dml_smooth,
    loss_and_grads,
    negative_subsets,
    nll_loss,
    train,
)
from .pipeline import (
    CandidatePool,
    MarginReport,
    MetricsReport,
    PipelineConfig,
    evaluate,
    hits_at_k,
    margin_analysis,
    ndcg_at_k,
    recall_at_k,
    select_context,
    stratified_split,
    synth_dataset,
)

__version__ = "0.1.0"
