"""Query-aware visual token selection with adaptive retention budgets.

The pipeline scores visual tokens against a text query with cross
attention, predicts an instance-specific retention fraction, gates
tokens through a solved-threshold Gumbel straight-through gate (hard
Top-n at inference), and re-encodes the survivors with absolute-time
information.
"""

from .autodiff import Tape, Var, finite_difference_gradient
from .budget import (
    BudgetDecision,
    BudgetFeatures,
    BudgetHead,
    compute_budget,
    extract_features,
    predict_rho,
)
from .config import RunConfig, load_config, parse_config_text
from .gate import GateConfig, KeepMask, find_threshold, hard_top_n, soft_gate_train, threshold_gradients
from .harness import (
    AblationVariant,
    OptimizerConfig,
    WorkloadSpec,
    bench_scaling,
    correlation_report,
    generate_workload,
    run_ablation,
    train_desk_scale,
)
from .objective import DualState, PenaltyWeights, compute_penalties, dual_ascent, dual_penalty, total_loss
from .reencoder import ReencoderStack, reencode
from .scoring import AttentionMap, ScoringWeights, normalize_relevance, score
from .selector import (
    DiagnosticsRecord,
    SelectionResult,
    SelectorModel,
    load_weights,
    save_weights,
    select,
)

__version__ = "0.1.0"

__all__ = [
    "AblationVariant",
    "AttentionMap",
    "BudgetDecision",
    "BudgetFeatures",
    "BudgetHead",
    "DiagnosticsRecord",
    "DualState",
    "GateConfig",
    "KeepMask",
    "OptimizerConfig",
    "PenaltyWeights",
    "ReencoderStack",
    "RunConfig",
    "ScoringWeights",
    "SelectionResult",
    "SelectorModel",
    "Tape",
    "Var",
    "WorkloadSpec",
    "bench_scaling",
    "compute_budget",
    "compute_penalties",
    "correlation_report",
    "dual_ascent",
    "dual_penalty",
    "extract_features",
    "find_threshold",
    "finite_difference_gradient",
    "generate_workload",
    "hard_top_n",
    "load_config",
    "load_weights",
    "normalize_relevance",
    "parse_config_text",
    "predict_rho",
    "reencode",
    "run_ablation",
    "save_weights",
    "score",
    "select",
    "soft_gate_train",
    "threshold_gradients",
    "total_loss",
    "train_desk_scale",
]
