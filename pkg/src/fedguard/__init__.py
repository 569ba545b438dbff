"""Federated averaging simulator with anomaly-score based client banning."""
from .attack import AttackSpec, FirstLayerNoise, RandomParams, inject
from .data import IID, Dataset, NonIIDEqual, NonIIDUnequal, load_mnist, partition, synthetic_dataset
from .estimator import FederatedClassifier
from .exceptions import (
    ConfigError,
    DomainError,
    FedGuardError,
    FormatError,
    NumericError,
    ProtocolError,
    ShapeError,
)
from .federation import (
    FederationConfig,
    RoundRecord,
    ServerState,
    aggregate,
    anomaly_scores,
    flag_anomalous,
    run_experiment,
    run_round,
    threshold,
)
from .nn import ModelParams, ModelSpec, build_spec

__version__ = "0.1.0"
