"""Randomised treatment-allocation designs that trade off targeting and learning.

The usual flow: build a :class:`Cohort`, express the design as a
:class:`DesignProblem`, solve its dual with :func:`solve_dual`, freeze the
result into a :class:`Policy`, then evaluate it or sweep a whole frontier.
"""

from .cohort import Cohort, Individual, OutcomeModel, draw_potential_outcomes, load_cohort, synthesize_cohort, write_cohort
from .constraints import (
    ATE,
    ConstraintSpec,
    DesignProblem,
    Estimand,
    check_feasibility,
    make_budget_cap,
    make_fairness_pair,
    make_utility_floor,
    max_achievable_utility,
)
from .dual import DualSolution, SolverOptions, dual_norm_diagnostic, inner_solve, solve_dual
from .errors import InfeasibleDesign
from .evaluator import efficiency_variance, pointwise_variance_curve, simulate_trial, utility_report
from .fairness import fairness_comparison
from .frontier import DesignTemplate, Frontier, bootstrap_bands, ninety_percent_point, sweep
from .policy import Policy, assign_probability, draw_assignment, export_policy, import_policy
from .power import PowerSpec, ik_bandwidth, rct_benchmark, rd_benchmark, wald_sample_size

__version__ = "0.1.0"
