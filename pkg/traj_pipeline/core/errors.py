"""Exception hierarchy shared by every layer of the pipeline."""


class TrajectoryError(Exception):
    """Root of all pipeline errors."""


class InvalidConfig(TrajectoryError, ValueError):
    """A configuration record violates its invariants."""


class DegenerateColumn(TrajectoryError, ValueError):
    """A time point cannot be standardized (too few observations or zero variance)."""


class ParseError(TrajectoryError, ValueError):
    """A cohort or labels file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NonMonotoneTimes(TrajectoryError, ValueError):
    """A subject's observation times are not strictly increasing."""

    def __init__(self, subject_id: str, detail: str = ""):
        self.subject_id = subject_id
        message = f"subject '{subject_id}' has non-increasing observation times"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class NotPositiveDefinite(TrajectoryError):
    """Cholesky factorization failed even at the largest allowed jitter."""


class InvalidState(TrajectoryError):
    """A partition state is internally inconsistent."""


class NumericalFailure(TrajectoryError):
    """A sampling step produced no usable probability mass."""


class DegenerateFit(TrajectoryError):
    """An EM run collapsed a latent class (or every restart did)."""


class NotEnoughSubjects(TrajectoryError, ValueError):
    """Too few eligible subjects for the requested hold-out size."""


class ZeroVariance(TrajectoryError, ValueError):
    """Correlation is undefined because an input vector is constant."""


class FailureRateExceeded(TrajectoryError):
    """Too many evaluation trials failed for the report to be meaningful."""
