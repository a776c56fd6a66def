"""
Exception hierarchy for the light-DARTS engine.

Input and format problems subclass ValueError so callers that only know about
built-in exceptions still catch them.
"""

from typing import Optional


class LightDartsError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(LightDartsError, ValueError):
    """Tensor or feature dimensions do not agree."""


class NonFiniteError(LightDartsError, ArithmeticError):
    """A NaN or Inf reached a loss, a logit or a gradient."""

    def __init__(self, message: str, batch_id: Optional[int] = None):
        if batch_id is not None:
            message = f"{message} (batch {batch_id})"
        super().__init__(message)
        self.batch_id = batch_id


class FeatureFormatError(LightDartsError, ValueError):
    """A feature file is not a valid FAFD file."""


class ManifestError(LightDartsError, ValueError):
    """A manifest line is malformed or violates the manifest rules."""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class GenotypeParseError(LightDartsError, ValueError):
    """Genotype text could not be parsed."""

    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class ScoreFileError(LightDartsError, ValueError):
    """A score file line is malformed."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ModelFormatError(LightDartsError, ValueError):
    """A model file is corrupt or does not match its genotype."""


class ConfigFileError(LightDartsError, ValueError):
    """A key=value config file line is malformed."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DatasetError(LightDartsError):
    """A dataset entry could not be read."""

    def __init__(self, message: str, utt_id: Optional[str] = None):
        if utt_id is not None:
            message = f"{utt_id}: {message}"
        super().__init__(message)
        self.utt_id = utt_id


class EvaluationError(LightDartsError, ValueError):
    """Scores cannot be evaluated: a class is missing or ids do not match."""
