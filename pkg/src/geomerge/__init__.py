"""geomerge: norm-preserving geodesic checkpoint merging, Euclidean merge
baselines, and representation-collapse diagnostics."""

from .delta_ops import (
    SparsifySpec,
    dare_drop,
    della_drop,
    disjoint_merge,
    elect_signs,
    task_vector,
    trim_topk,
)
from .diagnostics import (
    ActivationMatrix,
    DiagnosticsReport,
    SpectralStats,
    bootstrap_stats,
    covariance_spectrum,
    diagnostics_report,
    effective_rank,
    mean_activation_variance,
    numerical_rank,
    participation_ratio,
    spectral_stats,
    stable_rank,
    toy_forward_collect,
    weight_norm_report,
)
from .merge_methods import (
    MergeJob,
    MergeMethod,
    MergeSummary,
    merge_dare,
    merge_della,
    merge_karcher,
    merge_lerp,
    merge_model_stock,
    merge_multislerp,
    merge_slerp,
    merge_task_arithmetic,
    merge_ties,
    run_merge,
)
from .recipe import MergeRecipe, load_recipe, parse_recipe
from .sphere import (
    KarcherConfig,
    KarcherResult,
    frechet_objective,
    geodesic_distance,
    karcher_mean,
    normalize_to_sphere,
    slerp,
    sphere_exp,
    sphere_log,
)
from .tensor_io import (
    AlignmentReport,
    Checkpoint,
    CheckpointHandle,
    TensorRecord,
    open_checkpoint,
    read_checkpoint,
    validate_aligned,
    write_checkpoint,
)

__version__ = "0.1.0"

__all__ = [
    "ActivationMatrix",
    "AlignmentReport",
    "Checkpoint",
    "CheckpointHandle",
    "DiagnosticsReport",
    "KarcherConfig",
    "KarcherResult",
    "MergeJob",
    "MergeMethod",
    "MergeRecipe",
    "MergeSummary",
    "SparsifySpec",
    "SpectralStats",
    "TensorRecord",
    "bootstrap_stats",
    "covariance_spectrum",
    "dare_drop",
    "della_drop",
    "diagnostics_report",
    "disjoint_merge",
    "effective_rank",
    "elect_signs",
    "frechet_objective",
    "geodesic_distance",
    "karcher_mean",
    "load_recipe",
    "mean_activation_variance",
    "merge_dare",
    "merge_della",
    "merge_karcher",
    "merge_lerp",
    "merge_model_stock",
    "merge_multislerp",
    "merge_slerp",
    "merge_task_arithmetic",
    "merge_ties",
    "normalize_to_sphere",
    "numerical_rank",
    "open_checkpoint",
    "parse_recipe",
    "participation_ratio",
    "read_checkpoint",
    "run_merge",
    "slerp",
    "spectral_stats",
    "sphere_exp",
    "sphere_log",
    "stable_rank",
    "task_vector",
    "toy_forward_collect",
    "trim_topk",
    "validate_aligned",
    "weight_norm_report",
    "write_checkpoint",
]
