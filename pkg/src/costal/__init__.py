"""Cost-sensitive active learning for volumetric segmentation data.

Committee disagreement scores unlabeled stacks, a log-linear model predicts
their labeling time from predicted-mask morphology, and an exact 0-1
knapsack picks the batch with the most uncertainty that fits a time budget.
"""

from .committee import Committee, LearnerConfig, LinearPatchLearner, sliding_window_predict, train_committee
from .core_data import DatasetManifest, HeatmapStack, Stack, load_dataset, load_stack, save_dataset, save_stack
from .cost_model import CostModelParams, TimeSample, fit, predict_time
from .metrics import average_precision, evaluate
from .heatmap_analysis import ThresholdSet, mean_heatmap, stack_features
from .selection import Budget, SelectionItem, SelectionResult, knapsack_select, select
from .simulation import ALRoundResult, ExperimentConfig, run_core_set, run_cost_sensitive, run_wild
from .synthetic import SyntheticConfig, generate_synthetic
from .uncertainty import AggregationConfig, js_divergence, stack_uncertainty

__version__ = "0.1.0"

__all__ = [
    "ALRoundResult",
    "AggregationConfig",
    "Budget",
    "Committee",
    "CostModelParams",
    "DatasetManifest",
    "ExperimentConfig",
    "HeatmapStack",
    "LearnerConfig",
    "LinearPatchLearner",
    "SelectionItem",
    "SelectionResult",
    "Stack",
    "SyntheticConfig",
    "ThresholdSet",
    "TimeSample",
    "average_precision",
    "evaluate",
    "fit",
    "generate_synthetic",
    "js_divergence",
    "knapsack_select",
    "load_dataset",
    "load_stack",
    "mean_heatmap",
    "predict_time",
    "run_core_set",
    "run_cost_sensitive",
    "run_wild",
    "save_dataset",
    "save_stack",
    "select",
    "sliding_window_predict",
    "stack_features",
    "stack_uncertainty",
    "train_committee",
]
