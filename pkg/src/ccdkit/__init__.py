"""Continual category discovery over embedding streams.

A labeled batch seeds prototypes and a frozen representation; unlabeled
batches are split into known and novel samples, novel classes are counted
and discovered without supervision, each class is routed onto its own
orthogonal direction, and a small replay pool keeps the initial classes
from fading.
"""

from .config import EngineConfig, default_benchmark_config, load_config
from .discovery import (APConfig, DiscoveryResult, affinity_propagation,
                        calibrate_ap_preference, calibrate_ap_quantile,
                        calibrate_merge_threshold, fine_discovery, gmm_fit,
                        joint_discover, merge_classes)
from .encoder import FeedForwardNet, FrozenNetError
from .evaluation import (RunMetrics, StageMetrics, aggregate,
                         clustering_accuracy, evaluate_stage, forgetting,
                         hungarian_assignment)
from .harness import (Stream, StreamSpec, generate_stream, load_embeddings,
                      load_embeddings_text, load_report, report_json,
                      save_embeddings, save_embeddings_text, save_report)
from .numerics import (AdamState, adam_step, cosine_similarity,
                       finite_diff_grad, make_rng, relative_error)
from .pipeline import Engine, incremental_loss, orthogonal_ce, run_stream
from .pools import DynamicPool, StaticPool
from .prototypes import (CapacityError, ContrastiveHyper, OrthogonalBank,
                         PrototypeBank, contrastive_loss)
from .splitter import (SplitConfig, SplitResult, calibrate_epsilon,
                       nonparametric_split, parametric_split)

__version__ = "0.1.0"

__all__ = [
    "APConfig",
    "AdamState",
    "CapacityError",
    "ContrastiveHyper",
    "DiscoveryResult",
    "DynamicPool",
    "Engine",
    "EngineConfig",
    "FeedForwardNet",
    "FrozenNetError",
    "OrthogonalBank",
    "PrototypeBank",
    "RunMetrics",
    "SplitConfig",
    "SplitResult",
    "StageMetrics",
    "StaticPool",
    "Stream",
    "StreamSpec",
    "adam_step",
    "affinity_propagation",
    "aggregate",
    "calibrate_ap_preference",
    "calibrate_ap_quantile",
    "calibrate_epsilon",
    "calibrate_merge_threshold",
    "clustering_accuracy",
    "contrastive_loss",
    "cosine_similarity",
    "default_benchmark_config",
    "evaluate_stage",
    "fine_discovery",
    "finite_diff_grad",
    "forgetting",
    "generate_stream",
    "gmm_fit",
    "hungarian_assignment",
    "incremental_loss",
    "joint_discover",
    "load_config",
    "load_embeddings",
    "load_embeddings_text",
    "load_report",
    "make_rng",
    "merge_classes",
    "nonparametric_split",
    "orthogonal_ce",
    "parametric_split",
    "relative_error",
    "report_json",
    "run_stream",
    "save_embeddings",
    "save_embeddings_text",
    "save_report",
    "__version__",
]
