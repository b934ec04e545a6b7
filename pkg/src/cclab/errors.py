"""Exception types shared across the laboratory."""


class CcLabError(Exception):
    """Base class for all cclab errors."""


class UnsupportedFrame(CcLabError):
    pass


class OutOfDomain(CcLabError):
    pass


class InvalidParameter(CcLabError):
    pass


class ResolutionTooCoarse(CcLabError):
    pass


class NoConvergence(CcLabError):
    pass


class CoordinateFailure(CcLabError):
    pass


class StabilityError(CcLabError):
    pass


class DomainTooSmall(CcLabError):
    pass


class InsufficientData(CcLabError):
    pass


class DegenerateInfimum(CcLabError):
    pass


class DegenerateDenominator(CcLabError):
    pass


class ManifestIncomplete(CcLabError):
    pass


class ConfigError(CcLabError):
    """Raised on malformed experiment configuration, carries location info."""

    def __init__(self, message, section=None, key=None):
        loc = ""
        if section is not None:
            loc = f" [section {section!r}" + (f", key {key!r}]" if key else "]")
        super().__init__(message + loc)
        self.section = section
        self.key = key


class DomainTooSmallWarning(UserWarning):
    """Reported (not raised) when a kernel loses noticeable mass at the boundary."""
