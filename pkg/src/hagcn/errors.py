"""Exception types shared across the package."""


class FormatError(ValueError):
    """A byte stream or text file does not match its declared format."""


class ConfigError(ValueError):
    """A configuration dict or file is malformed or has unknown keys."""


class NondeterminismError(RuntimeError):
    """A function produced different outputs on identical inputs."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during optimization."""
