class ArgumentError(ValueError):
    """Raised when an operation receives arguments outside its contract."""


class ConfigurationError(ValueError):
    """Raised for invalid model, policy, batch or run configurations."""


class NonFiniteLossError(RuntimeError):
    """Raised when a training loss turns NaN or infinite.

    ``batch_ids`` names the samples of the offending batch so the step can be
    replayed.
    """

    def __init__(self, message, batch_ids=()):
        super().__init__(message)
        self.batch_ids = list(batch_ids)
