"""Exception hierarchy shared by all dsdf modules.

Every error carries a short ``category`` string; the CLI prints it next to the
message and maps the error to exit status 1.
"""


class DsdfError(Exception):
    category = "runtime"


class ConfigurationError(DsdfError, ValueError):
    category = "configuration"


class InputShapeError(DsdfError, ValueError):
    category = "input"


class NumericError(DsdfError, ArithmeticError):
    category = "numeric"


class TrainingDivergenceError(NumericError):
    category = "divergence"

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class InvariantViolationError(DsdfError, ValueError):
    category = "invariant"


class DegenerateLikelihoodError(NumericError):
    category = "degenerate-likelihood"


class DegenerateWeightsError(DsdfError, ValueError):
    category = "degenerate-weights"


class CoverageError(DsdfError, ValueError):
    category = "coverage"

    def __init__(self, message, missing=()):
        super().__init__(message)
        self.missing = tuple(missing)


class UnsupportedArchitectureError(DsdfError, ValueError):
    category = "unsupported-architecture"


class ParseError(DsdfError, ValueError):
    category = "parse"

    def __init__(self, message, position=None):
        super().__init__(message if position is None else f"{message} (at {position})")
        self.position = position


class ValidationError(DsdfError, ValueError):
    category = "validation"


class UsageError(DsdfError, ValueError):
    category = "usage"


class CheckpointError(DsdfError):
    category = "checkpoint"


class CorruptManifestError(CheckpointError):
    category = "corrupt-manifest"


class TruncatedBlobError(CheckpointError):
    category = "truncated-blob"


class FormatVersionError(CheckpointError):
    category = "format-version"
