"""Exception types shared across the package."""


class RiskAdaptError(Exception):
    """Base class for all package errors."""


class ParseError(RiskAdaptError):
    """A data file could not be parsed; message names the offending line."""


class IntegrityError(RiskAdaptError):
    """Input data violates a structural invariant (e.g. duplicate ids)."""


class SchemaMismatchError(RiskAdaptError):
    """A record or feature vector does not conform to the declared schema."""


class ConfigError(RiskAdaptError):
    """A run configuration or experiment plan is invalid."""


class EmptyPartitionError(RiskAdaptError):
    """A required data partition is empty.

    Raised by risk-model fitting when validation has no mispredicted or no
    correct instances; callers should skip the refit and keep the previous
    model.
    """
