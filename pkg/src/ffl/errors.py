"""Exception types raised across the package."""


class FFLError(Exception):
    """Base class for all library errors."""


class DimensionError(FFLError, ValueError):
    """Tensor extents are incompatible with an operation."""


class ContractError(FFLError, ValueError):
    """An argument violates an operation's precondition."""


class ConfigError(FFLError, ValueError):
    """A configuration value is missing, unknown or inconsistent.

    ``key`` names the offending dotted config key when one is known.
    """

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class BuildError(FFLError):
    """A network description cannot be turned into a network."""


class TopologyError(BuildError):
    """An ensemble topology is inconsistent with its branch specs."""


class CorruptDatasetError(FFLError):
    """A dataset file does not match its declared binary format."""


class CheckpointError(FFLError):
    """A checkpoint file cannot be loaded."""


class NonFiniteLossError(FFLError):
    """Training produced non-finite losses repeatedly."""
