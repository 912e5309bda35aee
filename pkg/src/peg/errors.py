"""Exception types shared across the package."""


class PegError(Exception):
    """Base class for all estimation and data errors raised by peg."""


class DataError(PegError):
    """Invalid input data (missing values, bad domains, malformed files)."""


class RankDeficiencyError(PegError):
    """A design or moment matrix does not have the required rank."""


class SeparationError(PegError):
    """Logistic likelihood has no finite maximizer (perfect separation)."""


class ConvergenceError(PegError):
    """An iterative procedure failed to converge."""


class NumericalError(PegError):
    """Ill-conditioned or degenerate numerical problem."""
