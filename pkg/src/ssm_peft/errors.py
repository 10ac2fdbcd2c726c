"""Exception types shared across modules."""


class ConfigError(ValueError):
    """Malformed or unknown configuration entry; ``key`` is the dotted path."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class AdapterError(ValueError):
    """Adapter spec incompatible with the model (unknown target, bad mask, ...)."""


class TrainingError(RuntimeError):
    """Raised when optimization diverges (non-finite loss)."""

    def __init__(self, iteration, message):
        self.iteration = iteration
        super().__init__(message)
