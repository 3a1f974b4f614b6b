"""Shared exception types."""


class ConfigError(ValueError):
    """A problem or experiment configuration cannot be parsed or is inconsistent."""


class AssumptionViolationError(RuntimeError):
    """A standing assumption fails (e.g. discount rate below the growth rate)."""


class ConstraintViolationError(RuntimeError):
    """An intensity control produced a rate outside its admissible range."""


class DivergentPathsError(RuntimeError):
    """Too many simulated paths left the representable range."""
