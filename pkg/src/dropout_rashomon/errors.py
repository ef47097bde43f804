"""Exception types raised across the package."""


class InvalidArgument(ValueError):
    pass


class SingularMatrixError(InvalidArgument):
    pass


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; ``params`` holds the last finite state."""

    def __init__(self, message, params=None, epoch=None):
        super().__init__(message)
        self.params = params
        self.epoch = epoch


class IncompatibleSets(ValueError):
    pass


class ConfigError(ValueError):
    """Invalid run configuration. ``field`` is a dotted path into the config."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class DatasetError(ValueError):
    pass
