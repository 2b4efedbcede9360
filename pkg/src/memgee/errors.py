"""Exception types shared across the package.

Every error raised intentionally by this package derives from
:class:`MemgeeError`, so callers can catch one base class at the
boundary (the CLI maps them onto exit codes).
"""


class MemgeeError(Exception):
    """Base class for all errors raised by this package."""


class UserInputError(MemgeeError):
    """Invalid user-supplied data or configuration (CLI exit code 1)."""


class NumericalError(MemgeeError):
    """Numerical failure during estimation (CLI exit code 2)."""


# ---------------------------------------------------------------------------
# linear algebra / sampling / differentiation

class SingularMatrix(NumericalError):
    """Coefficient matrix is singular to working precision."""


class NotPSD(NumericalError):
    """Covariance matrix has an eigenvalue below the PSD tolerance."""


class NonFinite(NumericalError):
    """A function evaluation produced NaN or infinity."""


# ---------------------------------------------------------------------------
# data layer

class SchemaError(UserInputError):
    """CSV header does not match the expected long format."""


class ParseError(UserInputError):
    """A CSV cell could not be parsed; message carries row and column."""


class DuplicateTime(UserInputError):
    """A subject has two records at the same time point."""


class LengthMismatch(UserInputError):
    """Paired arrays have different lengths."""


class NonMonotoneTimes(UserInputError):
    """Time points are not strictly increasing."""


class DimensionMismatch(UserInputError):
    """Matrix or vector dimensions are incompatible."""


class DesignMismatch(UserInputError):
    """Operation requested for a study design it does not support."""


# ---------------------------------------------------------------------------
# estimation

class RankDeficientDesign(NumericalError):
    """Design matrix does not have full column rank."""


class TooFewSubjects(UserInputError):
    """Not enough subjects to identify the model."""


class NoConvergence(NumericalError):
    """Iterative fit failed to converge within the iteration budget."""


class InsufficientLags(UserInputError):
    """No usable records with a lagged-exposure summary."""


class InsufficientPairs(UserInputError):
    """No subject contributes a within-subject pair of residuals."""


class QuadratureFailure(NumericalError):
    """Numerical integration returned a non-finite value."""


class SeparationSuspected(NumericalError):
    """Linear predictor diverged on a large share of observations."""


class SingularBread(NumericalError):
    """Stacked Jacobian (bread) matrix is singular."""


class SingularVariance(NumericalError):
    """A variance matrix required by a combination step is singular."""


class InfeasibleCorrelation(NumericalError):
    """Requested correlation is outside the feasible range."""


# ---------------------------------------------------------------------------
# simulation harness

class AllReplicatesFailed(NumericalError):
    """Every Monte Carlo replicate failed for an estimator."""
