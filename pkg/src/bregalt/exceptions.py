"""Exception hierarchy shared by all modules."""


class BregaltError(Exception):
    """Base class for every error raised by the package."""


class DomainError(BregaltError, ValueError):
    """A point lies outside the domain required by an operation."""


class DomainViolation(DomainError):
    """An iterate of an alternating run left the interior of the domain."""


class SolverFailure(BregaltError, RuntimeError):
    """An inner solver hit its iteration cap without reaching stationarity."""


class EmptySample(BregaltError, ValueError):
    pass


class DegenerateBall(BregaltError, ValueError):
    pass


class NotProjectedOn(BregaltError, ValueError):
    """The claimed foot point is not a left projection of the given point."""


class TooShort(BregaltError, ValueError):
    """A trace or sequence is too short for the requested statistic."""


class InvalidModel(BregaltError, ValueError):
    pass


class ConfigError(BregaltError, ValueError):
    pass
