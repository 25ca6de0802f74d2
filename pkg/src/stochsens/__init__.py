"""Stochastic linear-quadratic control, mean-variance portfolios and adjoint sensitivities."""

from ._backend import ENV_FLAG, backend_name
from .core import (BrownianEnsemble, ItoTriple, MCEstimate, TimeGrid, build_grid, inner_product_I,
                   integration_by_parts_residual, isometry_gap, ito_evaluate, sample_brownian)
from .errors import (ConvergenceFailureError, DegenerateProblemError, EllipticityError, IntegrationFailureError,
                     InvalidArgumentError, ControlWeightError, SingularRiccatiError, SolverError, SpecError, StochSensError,
                     UnsupportedFeatureError)
from .lq import LQSolution, LQSpec, mc_cost, riccati_integrate, solve_lq, value_duality_residual
from .mv import (MVSolution, MVSpec, mc_verify, mv_value, reduce, solve_closed_form, solve_dual)
from .picard import fbsde_picard_oracle
from .sensitivity import (LQPerturbation, MVPerturbation, SensitivityReport, check_lq, check_mv, dv_additive,
                          dv_lq, dv_mv, fd_check, linearity_check, solve_mv)
from .timefn import Constant, FromCallable, PiecewiseConstant, TimeFunction, as_time_function

__version__ = "0.1.0"

__all__ = [
    "ENV_FLAG", "backend_name",
    "BrownianEnsemble", "ItoTriple", "MCEstimate", "TimeGrid", "build_grid", "inner_product_I",
    "integration_by_parts_residual", "isometry_gap", "ito_evaluate", "sample_brownian",
    "ConvergenceFailureError", "DegenerateProblemError", "EllipticityError", "IntegrationFailureError",
    "InvalidArgumentError", "ControlWeightError", "SingularRiccatiError", "SolverError", "SpecError", "StochSensError",
    "UnsupportedFeatureError",
    "LQSolution", "LQSpec", "mc_cost", "riccati_integrate", "solve_lq", "value_duality_residual",
    "MVSolution", "MVSpec", "mc_verify", "mv_value", "reduce", "solve_closed_form", "solve_dual",
    "fbsde_picard_oracle",
    "LQPerturbation", "MVPerturbation", "SensitivityReport", "check_lq", "check_mv", "dv_additive", "dv_lq",
    "dv_mv", "fd_check", "linearity_check", "solve_mv",
    "Constant", "FromCallable", "PiecewiseConstant", "TimeFunction", "as_time_function",
]
