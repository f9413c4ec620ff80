"""Deterministic simulator for heterogeneous subgraph federated learning."""

from hfgnn.errors import (
    ConfigError,
    HfgnnError,
    ProtocolError,
    SequenceLengthError,
    ShapeError,
    SplitError,
    TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "HfgnnError",
    "ProtocolError",
    "SequenceLengthError",
    "ShapeError",
    "SplitError",
    "TrainingError",
    "__version__",
]
