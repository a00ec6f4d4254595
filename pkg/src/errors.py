"""
Exception hierarchy shared by every package.

Each exception carries the exit code the command line maps it to, so the CLI
can turn any library failure into a distinct, documented status.
"""


class ResteerError(Exception):
    """Base class for every error raised on purpose by this project"""
    exit_code = 1


class ShapeError(ResteerError, ValueError):
    """Tensor extents do not agree with what an operation needs"""


class NonFiniteError(ResteerError, ValueError):
    """A NaN or Inf reached a tensor while checked mode is on"""


class ScheduleError(ResteerError, ValueError):
    """Invalid noise schedule, timestep or sampler stride"""


class VocabularyError(ResteerError, ValueError):
    """Unknown word, duplicate entry or missing placeholder vectors"""


class ConceptError(ResteerError, ValueError):
    """A concept cannot be located, built or acted upon"""


class DivergenceError(ResteerError, ArithmeticError):
    """An optimization loss stopped being finite"""
    exit_code = 6


class ConfigError(ResteerError, ValueError):
    """Configuration failed schema validation"""
    exit_code = 3


class PatchMismatchError(ResteerError):
    """A patch does not fit the model it is applied to"""
    exit_code = 4


class FormatError(ResteerError):
    """A file is not what its header claims, or is damaged"""
    exit_code = 5


class OutputPathError(ResteerError):
    """A write would land outside the output directory"""
    exit_code = 7


class MetricError(ResteerError, ValueError):
    """A metric is undefined for its inputs (zero vector, dimension mismatch)"""
