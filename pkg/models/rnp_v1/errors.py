"""
Exception hierarchy shared by the RNPx library and entry points.
"""


class RNPError(Exception):
    """Base class for every error raised by RNPx."""


class DomainError(RNPError, ValueError):
    """An input lies outside the domain of the operation."""


class ContractError(RNPError, ValueError):
    """An API precondition was violated by the caller."""


class NumericError(RNPError, FloatingPointError):
    """A non-finite value appeared where finiteness is required."""


class GenerationError(RNPError):
    """A task generator could not produce a valid task."""


class SimulationError(GenerationError):
    """The ODE integrator left the admissible state space."""


class IngestionError(RNPError):
    """An external data file could not be read."""


class IntegrityError(RNPError):
    """A checkpoint file does not match its own manifest."""


class ConfigError(RNPError):
    """A configuration file or override is invalid."""


class CheckFailure(RNPError):
    """A self-check (gradient or oracle suite) did not pass."""

    def __init__(self, check: str, reason: str):
        super().__init__(f"{check}: {reason}")
        self.check = check
        self.reason = reason
