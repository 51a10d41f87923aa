"""Exception types shared across the package."""


class RcbfError(Exception):
    """Base class for all package-specific errors."""


class SpaceMismatchError(RcbfError):
    """Operands live in incompatible variable spaces, or a variable is missing."""


class ParseError(RcbfError):
    """Malformed polynomial text or config field."""


class UnsupportedKindError(RcbfError):
    """A closed-form recipe was requested for a set kind it does not cover."""


class OrderTooLowError(RcbfError):
    """Relaxation order is below the minimum admissible for the problem degree."""


class ExtractionFailedError(RcbfError):
    """Minimizer extraction from a moment matrix could not be completed."""


class SolverFailure(RcbfError):
    """The SDP solve ended in a state the caller cannot use."""


class ConfigError(RcbfError):
    """Invalid job configuration."""
