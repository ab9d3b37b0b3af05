"""Unbiased learning to rank on simulated clicks."""

from .data import Dataset, Query, generate_synthetic, normalize_features, parse_letor, split_dataset, write_letor
from .estimator import ProductionRanker, UnbiasedRanker
from .harness import ALGORITHMS, PARADIGMS, ConfigError, ExperimentConfig, repeat_and_compare, run
from .metrics import err_at_k, fisher_randomization_test, ndcg_at_k
from .ranker import RankerParams, init_params
from .simulator import ClickModel, sample_clicks

__version__ = "0.1.0"

__all__ = [
    "ALGORITHMS",
    "PARADIGMS",
    "ClickModel",
    "ConfigError",
    "Dataset",
    "ExperimentConfig",
    "ProductionRanker",
    "Query",
    "RankerParams",
    "UnbiasedRanker",
    "err_at_k",
    "fisher_randomization_test",
    "generate_synthetic",
    "init_params",
    "ndcg_at_k",
    "normalize_features",
    "parse_letor",
    "repeat_and_compare",
    "run",
    "sample_clicks",
    "split_dataset",
    "write_letor",
]
