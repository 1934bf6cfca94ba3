"""Exception types raised across the package."""


class SparseMarkovError(Exception):
    """Base class for all package errors."""


class ParameterDomainError(SparseMarkovError, ValueError):
    """A hyperparameter lies outside its admissible domain."""


class StabilityError(SparseMarkovError, ValueError):
    """A feedback matrix has an eigenvalue with non-negative real part."""


class SegmentError(SparseMarkovError, ValueError):
    """An input lies outside the requested inducing segment."""


class CoverageError(SparseMarkovError, ValueError):
    """Data inputs are not covered by the inducing grid."""


class FilterDivergenceError(SparseMarkovError, ArithmeticError):
    """A filtering step produced a covariance that is not positive definite."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non positive definite covariance at filter step {step}")


class StalePosteriorError(SparseMarkovError, RuntimeError):
    """The posterior was not computed from the current sites."""


class UnsupportedDimensionError(SparseMarkovError, ValueError):
    """Cubature was requested in more latent dimensions than supported."""


class LikelihoodDomainError(SparseMarkovError, ValueError):
    """An observation is invalid for the likelihood."""


class ConfigError(SparseMarkovError, ValueError):
    """An experiment configuration is malformed."""


class DataError(SparseMarkovError, ValueError):
    """A dataset file is malformed."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


class TrainingError(SparseMarkovError, RuntimeError):
    """Training aborted; ``iteration`` records where."""

    def __init__(self, iteration, cause):
        self.iteration = iteration
        self.cause = cause
        super().__init__(f"training aborted at iteration {iteration}: {cause}")
