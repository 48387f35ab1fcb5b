"""Label-noise learning lab: sieving criteria, noise generators, training
loops, and Monte-Carlo verification of the sieve's error bounds."""

from .data import Dataset, gen_blobs, split, batches, balanced_subsample
from .noise import NoiseSpec, TransitionMatrix, transition_matrix
from .nncore import Network, OptimizerConfig
from .sieve import SieveConfig, SieveReport, confidence_error, lrt_score
from .trainer import TrainConfig, TrainHistory, train_ce, train_confes, train_coteaching
from .theory import TsybakovModel, make_tsybakov_model, bound_sweep

__all__ = [
    "Dataset", "gen_blobs", "split", "batches", "balanced_subsample",
    "NoiseSpec", "TransitionMatrix", "transition_matrix",
    "Network", "OptimizerConfig",
    "SieveConfig", "SieveReport", "confidence_error", "lrt_score",
    "TrainConfig", "TrainHistory", "train_ce", "train_confes", "train_coteaching",
    "TsybakovModel", "make_tsybakov_model", "bound_sweep",
]

__version__ = "0.1.0"
