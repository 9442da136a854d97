"""Task-continual Vision Transformers with per-task binary token and FFN masks."""

from .continual import ExperimentPlan, MeatHyper, Metrics, TaskSpec, run_experiment, train_base, train_task
from .meat import TaskMaskSet, load_masks, overhead_report, save_masks
from .vit import ViTConfig, ViTModel, load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "ExperimentPlan", "MeatHyper", "Metrics", "TaskSpec", "run_experiment", "train_base",
    "train_task", "TaskMaskSet", "load_masks", "overhead_report", "save_masks", "ViTConfig",
    "ViTModel", "load_model", "save_model",
]
