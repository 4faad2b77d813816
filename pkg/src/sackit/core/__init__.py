"""
Core toolkit: normalization and LoRA primitives, tuning plans, losses, metrics,
the fine-tuning engine and hyperparameter search.
"""

from .common import SacKitError
from .primitives import AffineNorm, LoRAAdapter, compute_stats, lora_forward, normalize_affine
from .selection import TuningPlan, ArchitectureSpec, audit_budget, make_plan, select_trainables, assert_frozen
from .losses import LossForm, bce_loss, dice_loss, hybrid_loss
from .metrics import ConfusionCounts, MetricValues, compute_metrics, aggregate
from .toy_model import ToySegmenter, ToySegmenterSpec, build_toy_segmenter
from .engine import FineTuningEngine, TrainConfig, TrainingJob, train, load_checkpoint
from .search import SearchSpace, enumerate_grid, sample_trials, run_search

__all__ = [
    'SacKitError',
    'AffineNorm', 'LoRAAdapter', 'compute_stats', 'lora_forward', 'normalize_affine',
    'TuningPlan', 'ArchitectureSpec', 'audit_budget', 'make_plan', 'select_trainables', 'assert_frozen',
    'LossForm', 'bce_loss', 'dice_loss', 'hybrid_loss',
    'ConfusionCounts', 'MetricValues', 'compute_metrics', 'aggregate',
    'ToySegmenter', 'ToySegmenterSpec', 'build_toy_segmenter',
    'FineTuningEngine', 'TrainConfig', 'TrainingJob', 'train', 'load_checkpoint',
    'SearchSpace', 'enumerate_grid', 'sample_trials', 'run_search',
]
