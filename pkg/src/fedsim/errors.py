"""Exception types shared across the simulator."""


class FedSimError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(FedSimError):
    """Invalid configuration: bad shapes, bad keys, bad hyperparameters."""


class NumericError(FedSimError):
    """Non-finite values encountered where finite ones are required."""


class AggregationError(FedSimError):
    """Invalid aggregation request (empty contribution list, zero mass)."""


class DomainError(FedSimError):
    """Inputs outside an operation's mathematical domain."""


class FormatError(FedSimError):
    """Malformed external file (checkpoints, IDX datasets)."""
