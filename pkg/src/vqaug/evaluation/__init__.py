"""Scoring, multi-seed trials, statistical comparison and reporting."""
from .classifier import (
    ClassifierAdapter,
    ClassifierError,
    ExternalClassifier,
    LinearSoftmax,
    builtin_classifier,
    predict,
)
from .features import FeatureShift, feature_shift_report, histogram_entropy, sample_skewness
from .metrics import cv_reliability, delta_g, excluded_classes, macro_f, mark, single_class_f
from .report import format_cell, gain_table, write_gain_csv
from .stats import NotSignificant, RankingReport, dunn_test, kruskal_wallis, rank_methods
from .trials import DEFAULT_SEEDS, Scorer, TrialError, TrialResult, run_trials

__all__ = [
    "ClassifierAdapter",
    "ClassifierError",
    "DEFAULT_SEEDS",
    "ExternalClassifier",
    "FeatureShift",
    "LinearSoftmax",
    "NotSignificant",
    "RankingReport",
    "Scorer",
    "TrialError",
    "TrialResult",
    "builtin_classifier",
    "cv_reliability",
    "delta_g",
    "dunn_test",
    "excluded_classes",
    "feature_shift_report",
    "format_cell",
    "gain_table",
    "histogram_entropy",
    "kruskal_wallis",
    "macro_f",
    "mark",
    "predict",
    "rank_methods",
    "run_trials",
    "sample_skewness",
    "single_class_f",
    "write_gain_csv",
]
