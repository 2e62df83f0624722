"""Exception types shared across the package."""


class InfeasibleGeometryError(ValueError):
    """No placement satisfying the coverage requirements was found."""


class DomainError(ValueError):
    """An input lies outside the domain of a model formula."""


class PreconditionError(ValueError):
    """A point handed to a builder violates the builder's preconditions."""

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations or [])


class InfeasibleInstanceError(RuntimeError):
    """The optimization instance has no (strictly) feasible point."""


class SolverFailure(RuntimeError):
    """Numerical breakdown inside the barrier solver."""
