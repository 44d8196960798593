"""Exception types shared across the package."""


class Hazard2tsError(Exception):
    """Base class for all package-specific errors."""


class DataError(Hazard2tsError):
    """Invalid input data (bad records, counts, or file contents).

    ``details`` optionally carries per-record identifiers or row numbers.
    """

    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = list(details) if details is not None else []


class DomainError(Hazard2tsError):
    """Evaluation requested outside the supported domain.

    ``points`` lists the offending coordinates.
    """

    def __init__(self, message, points=None):
        super().__init__(message)
        self.points = list(points) if points is not None else []


class ConvergenceError(Hazard2tsError):
    """Iterative fit did not converge.

    Carries the last iterate so callers can inspect or report it.
    """

    def __init__(self, message, last_coef=None, score_norm=None, n_iter=None):
        super().__init__(message)
        self.last_coef = last_coef
        self.score_norm = score_norm
        self.n_iter = n_iter
