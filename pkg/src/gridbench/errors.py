"""Exception types shared across the package."""


class GridBenchError(Exception):
    """Base class for package-specific failures."""


class ManifestError(GridBenchError):
    """A dataset manifest could not be loaded; message names the offending row/path."""


class CapacityError(GridBenchError):
    """A sampling request exceeded the available pool; message names the cell."""


class ResourceBudgetError(GridBenchError):
    """A grid build would exceed the configured memory budget."""


class ConfigError(GridBenchError):
    """An experiment or training configuration is unusable."""
