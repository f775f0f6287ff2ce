"""Bayesian structure learning for high-dimensional linear Bayesian networks.

A spike-and-slab MAP estimate of the precision matrix is refit on a shrinking
node set; the smallest diagonal picks the next sink and thresholded slab
inclusion probabilities give its parents.
"""

__version__ = "0.1.0"

from .bagus import BagusConfig, PrecisionFit, fit_map
from .datagen import Dataset, ScenarioSpec, make_scenario, sample, sample_covariance
from .evaluation import (
    check_identifiability,
    hamming_distance,
    ordering_correct,
    recommend_hyperparams,
    run_sweep,
    theory_report,
)
from .learner import LearnResult, learn_ordering_only, learn_structure
from .model import Dag, LinearSemModel, covariance_from_model, precision_from_model

__all__ = [
    "BagusConfig", "PrecisionFit", "fit_map",
    "Dataset", "ScenarioSpec", "make_scenario", "sample", "sample_covariance",
    "check_identifiability", "hamming_distance", "ordering_correct",
    "recommend_hyperparams", "run_sweep", "theory_report",
    "LearnResult", "learn_ordering_only", "learn_structure",
    "Dag", "LinearSemModel", "covariance_from_model", "precision_from_model",
]
