"""Exception classes shared across the package."""


class LfdStackError(Exception):
    """Base class for all package-specific errors."""


class DegenerateDemo(LfdStackError):
    """Demonstration too short or collapsed to be usable."""


class NoConvergence(LfdStackError):
    """Iterative inversion failed to converge."""


class SingularityError(LfdStackError):
    """A configuration-dependent matrix could not be stabilized."""


class InstabilityAbort(LfdStackError):
    """Simulated joint velocities exceeded the hard safety bound."""


class ConfigError(LfdStackError):
    """Scenario or model configuration is invalid."""
