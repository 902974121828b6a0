"""Exception types shared across the toolkit."""


class ParameterError(ValueError):
    """An argument violates an operation's contract."""


class ConfigurationError(ValueError):
    """A config file or config object is inconsistent or incomplete."""


class StateError(RuntimeError):
    """An operation was invoked before its required state existed
    (unloaded weights, missing upstream checkpoint, ...)."""


class IngestionError(ValueError):
    """A dataset tree is malformed; the message names the offending path."""


class MetricUndefinedError(ValueError):
    """A metric has no defined value for the given inputs
    (single-class labels, no positive pixels, ...)."""
