"""Exception types raised across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of a model primitive."""


class ModelSpecError(ValueError):
    """A model specification violates one of its standing assumptions."""


class ImpossibleObservationError(ValueError):
    """An observed mark has zero intensity under every state with positive belief."""


class StabilityError(ValueError):
    """An explicit finite-difference step would produce a negative stencil weight."""


class ThinningBoundError(RuntimeError):
    """A simulated intensity exceeded the global bound used for thinning."""


class EstimationError(RuntimeError):
    """Parameter estimation cannot proceed on the supplied data."""


class ConfigError(ValueError):
    """A configuration file is malformed or describes an invalid model."""
