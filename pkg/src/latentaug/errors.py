"""Exception types shared across the toolkit.

Every failure mode callers are expected to handle has its own class so that
tests (and the CLI exit-code mapping) can distinguish data problems from
numerical blow-ups.
"""


class LatentAugError(Exception):
    """Base class for all toolkit errors."""


class EmptyInput(LatentAugError):
    pass


class DimensionMismatch(LatentAugError):
    pass


class FormatError(LatentAugError):
    """Malformed bytes: bad magic, bad version, truncation."""


class IntegrityError(LatentAugError):
    """Well-formed bytes whose contents contradict their manifest."""


class EmptyDataset(LatentAugError):
    pass


class InvalidScenario(LatentAugError):
    pass


class InvalidConfig(LatentAugError):
    pass


class InvalidLayer(LatentAugError):
    pass


class InvalidPrior(LatentAugError):
    pass


class InvalidSigma(LatentAugError):
    pass


class EmptySubdomainPool(LatentAugError):
    pass


class MissingCondition(LatentAugError):
    pass


class InsufficientSupport(LatentAugError):
    pass


class NumericalError(LatentAugError):
    """A non-finite value appeared where finite math was required."""
