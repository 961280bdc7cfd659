"""Error types raised by the library. Each carries a stable name used by the CLI."""


class SteinError(Exception):
    """Base class for library errors."""

    @property
    def name(self) -> str:
        return type(self).__name__


class SingularCoefficient(SteinError):
    pass


class CutLocus(SteinError):
    pass


class NoConvergence(SteinError):
    pass


class Unsupported(SteinError):
    pass


class StepTooLarge(SteinError):
    pass


class NotContractive(SteinError):
    pass


class ExcessiveCutLocus(SteinError):
    pass


class MissingConstants(SteinError):
    pass


class UnboundedCurvature(SteinError):
    pass


class DimensionUnsupported(SteinError):
    pass


class NonCompact(SteinError):
    pass


class ConfigError(SteinError):
    pass
