"""Exception types shared across the package."""


class DmssdError(Exception):
    pass


class ConfigError(DmssdError, ValueError):
    """Invalid dimensions, densities, hyperparameters or config keys."""


class InvalidSourceError(DmssdError, ValueError):
    pass


class InvalidPositionError(DmssdError, ValueError):
    pass


class MapDegenerateError(DmssdError, RuntimeError):
    """The map has no usable free cells for the requested operation."""


class ContractError(DmssdError, ValueError):
    """A caller violated an operation's precondition."""


class TrainingAborted(DmssdError, RuntimeError):
    pass


class MetricUndefined(DmssdError, ValueError):
    pass
