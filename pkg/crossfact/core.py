"""Core types, constants, and exceptions for crossfact."""

from enum import Enum
from typing import Any, Dict, Optional

import numpy as np
import numpy.typing as npt

# Type aliases
Logits = npt.NDArray[np.float64]
Distribution = npt.NDArray[np.float64]
Vector = npt.NDArray[np.float64]
TokenIds = npt.NDArray[np.int64]

K = 3
EPS = 1e-12
SOURCE_LANG = "src"


class Label(str, Enum):
    """Verdict classes, in the fixed class order SUP, REF, NEI."""

    SUP = "SUP"
    REF = "REF"
    NEI = "NEI"

    @property
    def index(self) -> int:
        return _LABEL_ORDER.index(self)

    @classmethod
    def from_index(cls, index: int) -> "Label":
        return _LABEL_ORDER[index]


_LABEL_ORDER = (Label.SUP, Label.REF, Label.NEI)


class Scenario(str, Enum):
    ZERO_SHOT = "zero-shot"
    NON_PARALLEL = "non-parallel"
    PARALLEL = "parallel"


class Regularizer(str, Enum):
    NONE = "none"
    KL = "kl"
    J = "j"
    JS = "js"
    MSE_FEATURE = "mse-feat"
    MSE_PENULTIMATE = "mse-penu"
    COS_FEATURE = "cos-feat"
    COS_PENULTIMATE = "cos-penu"

    @property
    def is_prediction_level(self) -> bool:
        return self in (Regularizer.KL, Regularizer.J, Regularizer.JS)

    @property
    def representation_level(self) -> Optional[str]:
        """'feature' or 'penultimate' for representation regularizers, else None."""
        if self in (Regularizer.MSE_FEATURE, Regularizer.COS_FEATURE):
            return "feature"
        if self in (Regularizer.MSE_PENULTIMATE, Regularizer.COS_PENULTIMATE):
            return "penultimate"
        return None


# Exceptions
class CrossFactError(Exception):
    """Base exception for all crossfact errors."""

    def __init__(self, message: str, error_code: Optional[str] = None, context: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.error_code = error_code
        self.context = context or {}


class ConfigurationError(CrossFactError):
    """Raised when settings or run configuration are inconsistent."""
    pass


class NumericalError(CrossFactError):
    """Raised on non-finite inputs or values off the probability simplex."""
    pass


class ShapeError(CrossFactError):
    """Raised when array shapes or model dimensions do not line up."""
    pass


class VocabularyError(CrossFactError):
    """Raised when a token or token id is outside the model vocabulary."""

    def __init__(self, message: str, position: Optional[int] = None, **kwargs: Any):
        super().__init__(message, **kwargs)
        self.position = position


class CheckpointError(CrossFactError):
    """Raised when a checkpoint is corrupt or does not match the expected layout."""
    pass


class DataError(CrossFactError):
    """Raised on malformed corpus files, label mismatches, or empty splits."""
    pass


class CalibrationError(CrossFactError):
    """Raised when prediction records violate the confidence range."""

    def __init__(self, message: str, record_index: Optional[int] = None, **kwargs: Any):
        super().__init__(message, **kwargs)
        self.record_index = record_index


class UsageError(CrossFactError):
    """Raised for command-line misuse."""
    pass
