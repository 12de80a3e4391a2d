"""Task-specific sigmoid batch normalization for multi-task networks, with analysis tools."""

from .analysis import (
    capacity_report,
    cluster_tasks,
    decompose_capacity,
    importance_matrix,
    interference_histogram,
    prune_and_measure,
    representation_projection,
    similarity_matrix,
    specialized_filters,
    spearman_stability,
)
from .data import MultiTaskDataset, SynthSpec, TaskDef, idx_load, noisy_family, reference_spec, synth_generate
from .model import ArchSpec, BlockSpec, MultiTaskModel, build, parameter_census, reference_arch
from .norm import NormState, convert_pretrained, norm_forward
from .train import OptimConfig, delta_m, evaluate, train_run

__version__ = "0.1.0"

__all__ = [
    "capacity_report",
    "cluster_tasks",
    "decompose_capacity",
    "importance_matrix",
    "interference_histogram",
    "prune_and_measure",
    "representation_projection",
    "similarity_matrix",
    "specialized_filters",
    "spearman_stability",
    "MultiTaskDataset",
    "SynthSpec",
    "TaskDef",
    "idx_load",
    "noisy_family",
    "reference_spec",
    "synth_generate",
    "ArchSpec",
    "BlockSpec",
    "MultiTaskModel",
    "build",
    "parameter_census",
    "reference_arch",
    "NormState",
    "convert_pretrained",
    "norm_forward",
    "OptimConfig",
    "delta_m",
    "evaluate",
    "train_run",
]
