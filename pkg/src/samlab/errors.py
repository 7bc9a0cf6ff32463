"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError and its
subclasses -> 2, NumericError -> 3.
"""


class SamlabError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SamlabError):
    """Operands have incompatible dimensions; message names both shapes."""


class DegenerateScaleError(SamlabError):
    """A scale that must be nonzero is zero (zero matrix, zero RevIN gamma)."""


class ContractError(SamlabError):
    """An input violates a documented precondition (e.g. non-stochastic rows)."""


class ConfigError(SamlabError):
    """Invalid run configuration or CLI usage."""


class DataError(SamlabError):
    """Bad input data: unparseable CSV, ragged rows, series too short."""


class FormatError(DataError):
    """Malformed checkpoint or report file; message carries a byte offset."""


class NumericError(SamlabError):
    """Non-finite values or a numerically impossible request mid-computation."""


class RankDeficiencyError(NumericError):
    """A Gram matrix expected to be positive definite is singular."""
