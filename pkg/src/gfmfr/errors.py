"""Exception types shared across the simulator.

The CLI maps these onto process exit codes, so every raise site in the
library should pick the narrowest type that applies.
"""


class GfmfrError(Exception):
    """Base class for all simulator errors."""


class ConfigError(GfmfrError):
    """Invalid or inconsistent experiment configuration (exit code 3)."""


class DataError(GfmfrError):
    """Malformed, empty, or inconsistent input data (exit code 4)."""


class NumericError(GfmfrError):
    """Non-finite value encountered during computation (exit code 5)."""


class ProtocolError(GfmfrError):
    """Federation steps invoked out of order or with mismatched shapes."""
