"""Monotone finite-difference tools for Hamilton-Jacobi-Bellman-Isaacs equations on the torus.

Parabolic and ergodic solvers, continuous dependence checks, and
homogenization of two-scale problems.
"""

__version__ = "0.1.0"

from .discretization import DiscreteOperator, Grid, GridFunction, cfl_timestep, discrete_hamiltonian, seminorm_hoelder
from .errors import (AdmissibilityError, ConfigurationError, ConvergenceError, DivergenceError, EllipticityError,
                     ExpressionError, HJBILabError, InconclusiveError, InfeasibleError)
from .operator_model import (CoefficientDistance, ControlSet, HJBIOperator, Modulus, RegularityCertificate,
                             check_coercivity, coefficient_distance, estimate_certificate, evaluate_hamiltonian,
                             verify_certificate)
from .parabolic import ParabolicTrajectory, long_time_slope, solve_parabolic, time_lipschitz_check
from .ergodic import (DiscountedSolve, ErgodicResult, corrector_regularity_check, ergodic_long_time,
                      ergodic_vanishing_discount, solve_discounted)
from .dependence import (BoundConstants, DependenceReport, ergodic_bound_rhs, ergodic_dependence_experiment,
                         parabolic_bound_rhs, parabolic_dependence_experiment)
from .homogenization import (CellProblem, ConvergenceTable, EffectiveHamiltonianCache, TwoScaleOperator,
                             build_cell_operator, convergence_study, effective_hamiltonian, effective_structure_check,
                             solve_effective, solve_two_scale)
