"""Exception hierarchy shared across the package."""


class MscureError(Exception):
    """Base class for all package errors."""


class SpecificationError(MscureError):
    """Model specification or configuration is invalid."""


class DataError(MscureError):
    """Input event-history data is inconsistent with the model specification."""


class FitError(MscureError):
    """A numerical sub-fit (Cox, logistic) failed."""


class ConvergenceError(FitError):
    """An iterative solver did not converge within its iteration cap."""

    def __init__(self, message, last_iterate=None, gradient_norm=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.gradient_norm = gradient_norm


class EstimationError(MscureError):
    """Standard-error estimation failed (singular information, too many bootstrap failures)."""


class PredictionError(MscureError):
    """A prediction request cannot be evaluated on the fitted model."""
