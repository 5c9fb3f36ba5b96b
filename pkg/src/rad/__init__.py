"""Retrieval-and-distill click-through-rate models for temporally shifting tabular data."""

from .data import (
    Dataset,
    Sample,
    Schema,
    SynthConfig,
    TemporalSplit,
    generate_synthetic_shift,
    load_csv,
    split_temporal,
)
from .estimators import OriginalClassifier, RADClassifier
from .metrics import log_loss, roc_auc
from .pipeline import ExperimentReport, TrainConfig, run_rad
from .retrieval import InvertedIndex, RetrievedSet, build_index, retrieve_topk

__all__ = [
    "Dataset", "Sample", "Schema", "SynthConfig", "TemporalSplit", "generate_synthetic_shift", "load_csv",
    "split_temporal", "OriginalClassifier", "RADClassifier", "log_loss", "roc_auc", "ExperimentReport",
    "TrainConfig", "run_rad", "InvertedIndex", "RetrievedSet", "build_index", "retrieve_topk",
]
__version__ = "0.1.0"
