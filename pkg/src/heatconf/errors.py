"""Exception hierarchy shared across the package."""


class HeatconfError(Exception):
    """Base class for all package errors."""


class ConfigError(HeatconfError):
    """Invalid model description, run configuration, or file schema."""


class DomainError(HeatconfError):
    """Chart point outside the model's chart domain."""


class SpectrumError(HeatconfError):
    """Spectrum unavailable, exhausted, or violating its invariants."""


class PreconditionError(HeatconfError):
    """A mathematical precondition failed (solvability, smallness, tracelessness)."""


class ConvergenceError(HeatconfError):
    """An iteration diverged or exhausted its step budget."""
