"""Exception types shared across the package."""


class DynlatError(Exception):
    """Base class for all package errors."""


class DimensionError(DynlatError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(DynlatError):
    """A computation produced non-finite values."""


class VocabError(DynlatError):
    """A token index is outside the configured vocabulary."""


class SizeError(DynlatError):
    """A problem instance is too large for an enumeration-based routine."""


class InfeasibleError(DynlatError):
    """No valid alignment exists for the given lattice and labels."""


class ConfigError(DynlatError):
    """A configuration value violates a structural constraint."""


class StateError(DynlatError):
    """An operation was called in a session state that forbids it."""


class TrainingDiverged(DynlatError):
    """The training loss became non-finite."""
