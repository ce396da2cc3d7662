"""
Utility modules for the intertwined EEG toolkit.
"""

from intertwined.utils.architectures import HyperConfig, Model, build_model, build_cascade, build_parallel, plan_shapes
from intertwined.utils.data import Dataset, TrialTensor, load_dataset, save_dataset, synth_generate
from intertwined.utils.stats import AccuracyTable, friedman_test, pairwise_bonferroni
from intertwined.utils.sweep import run_sweep, sample_config
from intertwined.utils.training import evaluate_accuracy, fit

__all__ = [
    'HyperConfig',
    'Model',
    'build_model',
    'build_cascade',
    'build_parallel',
    'plan_shapes',
    'Dataset',
    'TrialTensor',
    'load_dataset',
    'save_dataset',
    'synth_generate',
    'AccuracyTable',
    'friedman_test',
    'pairwise_bonferroni',
    'run_sweep',
    'sample_config',
    'evaluate_accuracy',
    'fit'
]
