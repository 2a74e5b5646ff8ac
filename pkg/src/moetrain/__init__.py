"""Desk-scale MoE training toolkit: routing, local-update sync, spike guard,
cluster simulation and scaling fits."""

from .config import ExperimentConfig
from .errors import (
    AnomalySignal,
    FitFailureError,
    MoETrainError,
    NumericalInstabilityError,
    OracleFailureError,
    RangeError,
    RejectedInputError,
    RejectedParameterError,
    StaleCacheError,
)
from .moe import MoEConfig, RouterState, init_params, moe_backward, moe_forward
from .numcore import RngStream

__version__ = "0.1.0"

__all__ = [
    "AnomalySignal",
    "ExperimentConfig",
    "FitFailureError",
    "MoEConfig",
    "MoETrainError",
    "NumericalInstabilityError",
    "OracleFailureError",
    "RangeError",
    "RejectedInputError",
    "RejectedParameterError",
    "RngStream",
    "RouterState",
    "StaleCacheError",
    "init_params",
    "moe_backward",
    "moe_forward",
]
