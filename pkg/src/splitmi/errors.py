"""Exception types shared across the package."""


class InputContractError(ValueError):
    """An argument violates a documented shape, range or type contract."""


class ConfigurationError(ValueError):
    """A configuration value is outside its allowed domain."""


class DivergenceError(FloatingPointError):
    """A loss became non-finite during optimization."""

    def __init__(self, message, term=None, epoch=None, step=None):
        super().__init__(message)
        self.term = term
        self.epoch = epoch
        self.step = step


class ProtocolError(RuntimeError):
    """A wire frame is malformed or arrived out of order."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class SessionAborted(RuntimeError):
    """The transport failed mid-session; device state was checkpointed."""

    def __init__(self, message, checkpoint=None, step=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.step = step


class WorldContractError(ValueError):
    """A synthetic world cannot supply the densities an operation needs."""
