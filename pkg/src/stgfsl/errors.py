"""Exception taxonomy shared by every module in the package."""

from __future__ import annotations


class StgfslError(Exception):
    """Base class for all package errors."""


class LoadError(StgfslError):
    """A dataset file is missing or unreadable."""


class ValidationError(StgfslError):
    """Loaded or constructed data violates a structural invariant."""


class DegenerateStatsError(ValidationError):
    """Normalization statistics cannot be fit (zero variance)."""


class EmptyDatasetError(ValidationError):
    """A series is too short to produce a single window."""


class ParameterError(StgfslError):
    """A function argument is outside its documented domain."""


class ContractError(StgfslError):
    """Tensor shapes or parameter collections do not line up."""


class SamplingError(StgfslError):
    """An episodic task cannot be sampled from the available pool."""


class DivergenceError(StgfslError):
    """Training produced a non-finite or exploding loss.

    Carries the episode (or step) index and whatever log rows were
    collected before the abort so callers can persist them.
    """

    def __init__(self, message: str, episode: int | None = None, log=None):
        super().__init__(message)
        self.episode = episode
        self.log = log if log is not None else []


class EvaluationError(StgfslError):
    """Evaluation was asked to run on an empty or malformed test set."""


class ConfigError(StgfslError):
    """An experiment configuration is inconsistent or incomplete."""
