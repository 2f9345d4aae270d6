"""Exception taxonomy shared by all modules.

Every error carries a short machine-parsable ``category`` string; the CLI
prints ``error: <category>: <detail>`` and maps categories to exit codes.
"""


class UatrError(Exception):
    """Base class for all package errors."""

    category = "error"


class AudioFormatError(UatrError):
    """Unsupported or malformed audio encoding."""

    category = "audio-format"


class CorruptFileError(UatrError):
    """File header promises more data than the file contains."""

    category = "corrupt-file"


class EmptyAudioError(UatrError):
    """Decoded audio holds zero samples."""

    category = "empty-audio"


class TooShortError(UatrError):
    """Signal shorter than one analysis window."""

    category = "too-short"


class ConfigError(UatrError):
    """Invalid or inconsistent configuration."""

    category = "config"


class ShapeError(UatrError):
    """Tensor or feature dimensions do not match the model contract."""

    category = "shape"


class LabelMappingError(UatrError):
    """A raw label or target category has no mapping."""

    category = "label-mapping"


class CheckpointError(UatrError):
    """Checkpoint is unreadable, tampered, or inconsistent."""

    category = "checkpoint"


class StaleTapeError(UatrError):
    """A backward tape was consumed twice."""

    category = "stale-tape"


class NonFiniteGradientError(UatrError):
    """A gradient tensor contains NaN or Inf; carries the tensor name."""

    category = "non-finite-grad"

    def __init__(self, tensor_name: str):
        super().__init__(f"non-finite gradient in tensor '{tensor_name}'")
        self.tensor_name = tensor_name


class EmptyEvaluationError(UatrError):
    """An evaluation was requested over zero clips."""

    category = "empty-evaluation"
