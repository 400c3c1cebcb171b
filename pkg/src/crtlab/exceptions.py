"""Exception hierarchy shared across crtlab."""


class CrtError(Exception):
    """Base class for all crtlab errors."""


class ConfigError(CrtError, ValueError):
    """Invalid configuration or mismatched dimensions."""


class PromptSetError(CrtError, ValueError):
    """A prompt-set document failed to parse or validate."""


class DuplicateIdError(PromptSetError):
    pass


class RangeError(CrtError, ValueError):
    """A latent or argument fell outside its permitted range."""


class InsufficientDataError(CrtError, ValueError):
    """Too few rollouts to compute the requested statistics."""


class MissingStatsError(CrtError, KeyError):
    """Frozen normalization statistics are unavailable for a prompt."""

    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return str(self.args[0]) if self.args else "missing statistics"


class UnsupportedModeError(CrtError, ValueError):
    pass


class NumericError(CrtError, ArithmeticError):
    """A non-finite value would have been written into the parameters."""
