"""Exception hierarchy.

``SpecError`` subclasses describe bad input (CLI exit code 2); ``SolverError``
subclasses describe numerical failures on valid input (CLI exit code 3).
"""


class StochSensError(Exception):
    """Base class for all package errors."""

    kind = "error"


class SpecError(StochSensError, ValueError):
    kind = "invalid-argument"


class InvalidArgumentError(SpecError):
    kind = "invalid-argument"


class ControlWeightError(SpecError):
    """The control weight is not uniformly positive definite."""

    kind = "control-weight"


class UnsupportedFeatureError(SpecError):
    kind = "unsupported-feature"


class EllipticityError(SpecError):
    kind = "ellipticity"


class SolverError(StochSensError, RuntimeError):
    kind = "solver"


class SingularRiccatiError(SolverError):
    kind = "singular-riccati"


class IntegrationFailureError(SolverError):
    kind = "integration-failure"


class ConvergenceFailureError(SolverError):
    kind = "convergence-failure"

    def __init__(self, message, last_residual=float("nan")):
        super().__init__(message)
        self.last_residual = last_residual


class DegenerateProblemError(SolverError):
    kind = "degenerate-problem"
