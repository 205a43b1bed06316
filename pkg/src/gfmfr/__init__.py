"""Deterministic desk-scale simulator for group-wise multimodal federated
recommendation (GFMFR): clients train a personal recommender on private
interactions, the server aggregates shared parameters, clusters clients by
predictor parameters, fuses server-held modality features per group, and
broadcasts compact preference signals that guide client-side distillation.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config, save_config
from .dataio import (
    InteractionStore,
    ModalityFeatures,
    SplitDataset,
    SyntheticSpec,
    generate_synthetic,
    leave_one_out_split,
    load_interactions,
    load_modality_features,
    sample_negatives,
    write_modality_features,
)
from .engine import (
    ExperimentResult,
    FederationState,
    RoundTrace,
    init_federation,
    run_experiment,
    run_round,
    write_outputs,
)
from .errors import ConfigError, DataError, GfmfrError, NumericError, ProtocolError

__all__ = [
    "ExperimentConfig",
    "ExperimentResult",
    "FederationState",
    "GfmfrError",
    "ConfigError",
    "DataError",
    "NumericError",
    "ProtocolError",
    "InteractionStore",
    "ModalityFeatures",
    "RoundTrace",
    "SplitDataset",
    "SyntheticSpec",
    "generate_synthetic",
    "init_federation",
    "leave_one_out_split",
    "load_config",
    "load_interactions",
    "load_modality_features",
    "run_experiment",
    "run_round",
    "sample_negatives",
    "save_config",
    "write_modality_features",
    "write_outputs",
    "__version__",
]
