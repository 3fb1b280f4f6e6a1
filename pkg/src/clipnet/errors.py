"""Exception hierarchy shared across the engine."""


class ClipnetError(Exception):
    """Base class for all engine errors."""


class DimensionError(ClipnetError):
    """Tensor extents disagree between operands (names the offending axis)."""


class GeometryError(ClipnetError):
    """Convolution/pooling output geometry is invalid (non-integer or non-positive)."""


class ParameterError(ClipnetError):
    """A scalar argument is outside its documented domain."""


class ConfigurationError(ClipnetError):
    """A model or block is wired inconsistently (e.g. missing projection params)."""


class ContractError(ClipnetError):
    """An API precondition was violated (e.g. non-scalar loss passed to backward)."""


class FormatError(ClipnetError):
    """A binary or text artifact is malformed; message carries the byte offset."""


class NumericError(ClipnetError):
    """A computation produced or met non-finite / degenerate values."""


class DegenerateStatisticsError(NumericError):
    """Batch statistics were requested over a single element."""


class UsageError(ClipnetError):
    """The command line could not be parsed (unknown flag, bad subcommand)."""
