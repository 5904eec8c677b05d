"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes, so raising the right class is
part of each module's contract: configuration and input-format problems are
usage errors (exit 2), non-finite numerics abort a run (exit 3), and failed
verification checks report themselves (exit 1).
"""


class ApfError(Exception):
    """Base class for every error this package raises deliberately."""


class ShapeError(ApfError):
    """Operand shapes violate an operation's contract."""


class ConfigError(ApfError):
    """A configuration value is missing, malformed, or inconsistent."""


class NumericError(ApfError):
    """A numeric invariant failed: non-finite values, degenerate rows."""


class DataFormatError(ApfError):
    """A serialized artifact (feature file, checkpoint) cannot be parsed."""


class ValidationError(ApfError):
    """Well-formed input whose content violates a documented invariant."""


class GenerationError(ApfError):
    """Synthetic data constraints cannot be satisfied."""


class MatchingError(ApfError):
    """Bipartite matching preconditions do not hold."""


class CheckFailure(ApfError):
    """A verification suite found a discrepancy."""
