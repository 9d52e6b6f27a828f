"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit 1,
data problems exit 2, numerical failures exit 3.
"""


class FlowsceneError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(FlowsceneError):
    """Invalid configuration, bad usage, or violated pipeline preconditions."""


class DataError(FlowsceneError):
    """Malformed or inconsistent scenario data."""


class GenerationError(DataError):
    """Scenario synthesis could not produce a valid sample."""


class InjectionError(DataError):
    """A hero maneuver could not be injected into the scenario."""


class ShapeError(FlowsceneError, ValueError):
    """Tensor operands with incompatible shapes."""


class NumericalError(FlowsceneError, ArithmeticError):
    """A forward pass produced NaN or Inf, or training diverged."""
