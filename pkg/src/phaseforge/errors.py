"""Exception types shared across the package."""


class PhaseForgeError(Exception):
    """Base class for package-specific failures."""


class ConfigurationError(PhaseForgeError, ValueError):
    """A config value or shape combination violates a documented contract."""


class DataError(PhaseForgeError, RuntimeError):
    """A dataset, checkpoint, or report on disk is missing or malformed."""


class TrainingDiverged(PhaseForgeError, RuntimeError):
    """The training loss became non-finite."""
