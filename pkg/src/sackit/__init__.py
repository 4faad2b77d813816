"""
sackit - selective fine-tuning toolkit for crack segmentation.
Trains only a chosen subset of a segmentation model's parameters (normalization
affines, decoder, LoRA adapters) and measures the result.
"""

__version__ = "1.0.0"

from .core.selection import TuningPlan, audit_budget, make_plan
from .core.losses import LossForm
from .core.toy_model import build_toy_segmenter
from .core.engine import FineTuningEngine, TrainConfig, TrainingJob, train, validate
from .core.search import run_search
from .processing.dataset import load_manifest, prepare_sample
from .processing.synth import synth_crack_dataset
from .processing.reporting import evaluate_dataset, export_qualitative, zero_shot_suite

__all__ = [
    'TuningPlan',
    'audit_budget',
    'make_plan',
    'LossForm',
    'build_toy_segmenter',
    'FineTuningEngine',
    'TrainConfig',
    'TrainingJob',
    'train',
    'validate',
    'run_search',
    'load_manifest',
    'prepare_sample',
    'synth_crack_dataset',
    'evaluate_dataset',
    'export_qualitative',
    'zero_shot_suite',
]
