"""Exception hierarchy shared across the package.

Every error raised on purpose derives from ClassPromptError so callers
(and the CLI exit-code mapping) can distinguish our failures from bugs.
"""


class ClassPromptError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(ClassPromptError):
    """A documented precondition or invariant was violated by the caller."""


class ShapeError(ContractError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(ContractError):
    """A configuration value is invalid; the message names the key path."""


class VocabularyError(ContractError):
    """A token id falls outside the encoder vocabulary."""


class DeterminismError(ClassPromptError):
    """A function expected to be deterministic returned differing values."""


class DegenerateEmbeddingError(ClassPromptError):
    """A row had (near-)zero norm where unit normalization was required."""


class DivergenceError(ClassPromptError):
    """Training produced NaN gradients or an exploding loss.

    Carries ``last_good``, the most recent healthy trainer state, so the
    caller can checkpoint it before giving up.
    """

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class DataFormatError(ClassPromptError):
    """Base for problems reading persisted files."""


class FormatVersionError(DataFormatError):
    """File declares a format version this code does not understand."""


class TruncatedFileError(DataFormatError):
    """Payload is shorter (or longer) than its declared length."""


class NonUnitVectorError(DataFormatError):
    """Loaded feature vectors are not unit-norm as the format requires."""


class CheckpointMismatchError(DataFormatError):
    """Checkpoint mode or shapes disagree with the requested configuration."""
