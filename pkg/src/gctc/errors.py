"""Exception types shared across the package."""


class GctcError(Exception):
    """Base class for all package errors."""


class ConfigError(GctcError, ValueError):
    """Missing, unknown or invalid configuration entries."""


class IntegrationError(GctcError, RuntimeError):
    """The plant integrator produced a non-finite state."""


class DivergenceError(GctcError, RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, episode: int | None = None):
        super().__init__(message if episode is None else f"episode {episode}: {message}")
        self.episode = episode


class MissingKeyError(ConfigError):
    """A required configuration key is absent."""


class UnknownKeyError(ConfigError):
    """The configuration contains a key the schema does not define."""
