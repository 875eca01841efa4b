"""Token-thinning transformer classifier.

A desk-scale transformer encoder for text classification that prunes
low-importance tokens out of the attention key/value set layer by layer
(guarded by quantile-anchored fuzzy memberships) and condenses the sequence
into a handful of learned combination tokens partway through the stack.
Ships with an analytical FLOPs/memory cost model, a training harness, and a
scikit-learn compatible estimator wrapper.
"""

from .exceptions import (
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    ParameterError,
    TokenIndexError,
    TokenThinnerError,
    VocabularyError,
)
from .tensor import Tensor, count_macs

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "count_macs",
    "TokenThinnerError",
    "DimensionError",
    "ParameterError",
    "TokenIndexError",
    "ConfigError",
    "VocabularyError",
    "DataError",
    "FormatError",
    "__version__",
]
