"""
Exception hierarchy for mmspeaker.

Every error also derives from the closest builtin so callers that only know
about ValueError / RuntimeError keep working.
"""

from typing import Optional


class MMSpeakerError(Exception):
    """Base class for all mmspeaker errors."""


class DegenerateInputError(MMSpeakerError, ValueError):
    pass


class ShapeError(MMSpeakerError, ValueError):
    pass


class NumericError(MMSpeakerError, ArithmeticError):
    pass


class DomainError(MMSpeakerError, ValueError):
    pass


class ContractError(MMSpeakerError, ValueError):
    pass


class StateError(MMSpeakerError, RuntimeError):
    pass


class ConfigError(MMSpeakerError, ValueError):
    pass


class FormatError(MMSpeakerError, ValueError):
    pass


class PrerequisiteError(MMSpeakerError, RuntimeError):
    pass


class TrainingError(MMSpeakerError, RuntimeError):
    def __init__(self, message: str, stage: Optional[str] = None, step: Optional[int] = None):
        super().__init__(message)
        self.stage = stage
        self.step = step
