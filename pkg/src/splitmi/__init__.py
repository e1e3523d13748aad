"""Mutual-information defenses for split learning, with attacks, bounds and a wire protocol."""

__version__ = "0.1.0"

from .errors import (
    ConfigurationError,
    DivergenceError,
    InputContractError,
    ProtocolError,
    SessionAborted,
    WorldContractError,
)
from .model import SplitModel, build_default_architecture, load_checkpoint, save_checkpoint
from .objectives import AuxClassifier, AuxGenerator, LossBreakdown, combined_objective, vclub_full, vclub_s_estimate
from .trainer import BaselineDefenseConfig, DefenseConfig, TrainingTrace, defense_step, plain_train, train

__all__ = [
    "AuxClassifier", "AuxGenerator", "BaselineDefenseConfig", "ConfigurationError", "DefenseConfig",
    "DivergenceError", "InputContractError", "LossBreakdown", "ProtocolError", "SessionAborted", "SplitModel",
    "TrainingTrace", "WorldContractError", "build_default_architecture", "combined_objective", "defense_step",
    "load_checkpoint", "plain_train", "save_checkpoint", "train", "vclub_full", "vclub_s_estimate",
]
