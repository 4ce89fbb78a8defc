"""Interleaved text-audio decoding with a cascade of multi-token predictors."""

from .errors import (
    CheckpointError,
    ConfigError,
    DomainError,
    MeasurementError,
    ScheduleError,
    TokencastError,
)
from .model import ModelConfig, Session, SpeechModel, TokenEvent
from .scheduler import MODES, ChunkRule, ScheduleResult, run_schedule
from .vocab import JointVocab, OracleSpec, TokenKind, build_oracle, build_vocab

__all__ = [
    "CheckpointError",
    "ChunkRule",
    "ConfigError",
    "DomainError",
    "JointVocab",
    "MODES",
    "MeasurementError",
    "ModelConfig",
    "OracleSpec",
    "ScheduleError",
    "ScheduleResult",
    "Session",
    "SpeechModel",
    "TokenEvent",
    "TokenKind",
    "TokencastError",
    "build_oracle",
    "build_vocab",
    "run_schedule",
]

__version__ = "0.1.0"
