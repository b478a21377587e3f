"""Exception types shared across the package."""


class SagexpError(Exception):
    """Base class for all package errors."""


class NonPositiveDefinite(SagexpError):
    """Cholesky factorization failed even after jitter escalation."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DomainError(SagexpError):
    """A scalar argument is outside its mathematical domain."""


class BetaUnavailable(SagexpError):
    """Theoretical confidence scaling requested without a capacity estimate."""


class OutOfDomain(SagexpError):
    """Query point lies outside the position domain box."""


class SpecError(SagexpError):
    """Inconsistent problem specification (dimensions, missing pieces)."""


class QpInfeasible(SagexpError):
    """QP declared primal infeasible by the divergence certificate."""

    def __init__(self, message, certificate=None):
        super().__init__(message)
        self.certificate = certificate


class QpMaxIter(SagexpError):
    """QP iteration limit hit before reaching the requested accuracy."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class EmptySet(SagexpError):
    """A goal-selection set contains no qualifying grid cell."""


class UnsafeStart(SagexpError):
    """Initial state is not certified safe by the round-0 lower bound."""


class DegenerateField(SagexpError):
    """Environment generation could not produce a usable field."""


class ConfigError(SagexpError):
    """Run configuration failed validation."""


class SolverBreakdown(SagexpError):
    """The OCP solver failed in a way the algorithm cannot recover from."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
