"""Exception hierarchy. Everything raised by this package derives from
TokenThinnerError so callers can catch broadly; the subclasses also derive
from the matching builtin where one exists."""


class TokenThinnerError(Exception):
    pass


class DimensionError(TokenThinnerError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ParameterError(TokenThinnerError, ValueError):
    """A numeric argument is outside its valid range."""


class TokenIndexError(TokenThinnerError, IndexError):
    """A token index is out of range or violates ordering/uniqueness."""


class ConfigError(TokenThinnerError, ValueError):
    """A model or run configuration field is invalid."""


class VocabularyError(TokenThinnerError, ValueError):
    """A token id is unknown to the vocabulary."""


class DataError(TokenThinnerError, ValueError):
    """A dataset row, label, or batch is malformed."""


class FormatError(TokenThinnerError, ValueError):
    """A serialized artifact (checkpoint, report) is corrupt or has an
    unsupported version."""
