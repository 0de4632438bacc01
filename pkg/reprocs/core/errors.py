"""
Exception hierarchy for reprocs.
"""


class ReprocsError(Exception):
    """Base class for every error raised by reprocs"""


class DimensionMismatchError(ReprocsError, ValueError):
    """Shapes or index sets are inconsistent"""


class NotOrthonormalError(ReprocsError, ValueError):
    """A matrix used as a basis does not have orthonormal columns"""


class EnumerationBudgetError(ReprocsError):
    """Exhaustive subset enumeration would exceed the configured budget"""

    def __init__(self, count: int, budget: int):
        super().__init__(f"{count} subsets exceed the enumeration budget of {budget}")
        self.count = count
        self.budget = budget


class EigenDecompositionError(ReprocsError):
    """LAPACK failed to converge on an eigen or singular value problem"""


class SingularSystemError(ReprocsError):
    """Restricted least-squares system is rank deficient"""

    def __init__(self, sigma_min: float, cutoff: float):
        super().__init__(
            f"restricted matrix is rank deficient "
            f"(smallest singular value {sigma_min:.3e} <= {cutoff:.1e})"
        )
        self.sigma_min = sigma_min
        self.cutoff = cutoff


class InfeasibleConfigError(ReprocsError, ValueError):
    """A generator or parameter configuration cannot be realised"""


class ZetaRangeError(InfeasibleConfigError):
    """zeta is outside the range allowed by the theorem parameter bounds"""


class SupportModelViolation(ReprocsError):
    """A support sequence breaks the model a construction relies on"""


class TrainingDataError(ReprocsError, ValueError):
    """Training data cannot produce an initial subspace estimate"""


class ConfigError(ReprocsError):
    """Configuration file or environment values are invalid"""


class NotSymmetricError(ReprocsError, ValueError):
    """A matrix expected to be symmetric is not, beyond the allowed slack"""
