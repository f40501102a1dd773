"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A parameter or combination of parameters is invalid."""


class ConfigFileError(ConfigurationError):
    """An experiment config file failed to parse or validate."""


class IngestError(ValueError):
    """A dataset file is missing, truncated, or malformed."""


class BudgetExhaustedError(RuntimeError):
    """A privacy spend was requested beyond the remaining budget."""
