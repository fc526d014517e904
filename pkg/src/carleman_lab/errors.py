"""Exception types shared across the package."""


class CarlemanLabError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(CarlemanLabError, ValueError):
    """An argument violates its documented domain."""


class PreconditionError(CarlemanLabError, ValueError):
    """Inputs are individually valid but violate an operation precondition."""


class WeightOverflowError(CarlemanLabError, OverflowError):
    """The squared exponential weight is not representable in float64.

    Carries the offending parameters so callers can shrink s or lambda.
    """

    def __init__(self, s, lam, psi_max, limit):
        self.s = s
        self.lam = lam
        self.psi_max = psi_max
        self.limit = limit
        super().__init__(
            f"squared weight exponent 2*s*exp(lam*psi_max) = "
            f"{2.0 * s * _safe_exp(lam * psi_max):.3g} exceeds {limit:.0f} "
            f"(s={s}, lam={lam}, max psi={psi_max:.6g}); reduce s or lambda"
        )


def _safe_exp(x):
    import math

    try:
        return math.exp(x)
    except OverflowError:
        return float("inf")


class ContinuationError(CarlemanLabError, RuntimeError):
    """Conjugate-gradient continuation failed to converge in budget.

    ``residual_histories`` maps path index -> list of residual norms.
    """

    def __init__(self, message, residual_histories):
        self.residual_histories = residual_histories
        super().__init__(message)


class ConfigError(CarlemanLabError, ValueError):
    """Configuration text failed validation; lists every violation."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__(
            "invalid configuration:\n  " + "\n  ".join(self.violations)
        )
