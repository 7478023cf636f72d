"""Per-group outcomes of designs with and without a fairness pair, and its variance cost."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .cohort import EVAL, Cohort
from .constraints import group_gap
from .dual import SolverOptions, solve_dual
from .errors import InfeasibleDesign
from .evaluator import utility_report
from .frontier import DesignTemplate
from .policy import Policy

THREADS_ENV = "ALLOCDESIGN_THREADS"


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _solve_level(train, template, c, options):
    problem = template.problem(train, c)
    try:
        sol = solve_dual(problem, options)
    except InfeasibleDesign:
        return None, None
    return Policy.from_solution(problem, sol), sol


def fairness_comparison(
    cohort: Cohort,
    template: DesignTemplate,
    c_grid,
    groups,
    eps=0.02,
    metric="utility",
    options: SolverOptions | None = None,
    split=EVAL,
    workers=None,
) -> list[dict]:
    """Solve each utility level with and without the fairness pair.

    Rows carry per-group recall (evaluated on ``split``) for both designs,
    the realised design-sample gap of the fair design, and
    ``pct_variance_increase = 100 (obj_fair - obj_base) / obj_base`` where
    ``obj`` is the design-sample surrogate objective. Levels at which the
    fair design is infeasible get ``feasible_fair = False``.
    """
    groups = tuple(str(g) for g in groups)
    train = cohort.train()
    base_t = replace(template, fairness=None)
    fair_t = replace(template, fairness={"metric": metric, "groups": list(groups), "eps": eps})

    def level(c):
        base_pol, base_sol = _solve_level(train, base_t, c, options)
        fair_pol, fair_sol = _solve_level(train, fair_t, c, options)
        row = {"c": float(c), "feasible_base": base_pol is not None, "feasible_fair": fair_pol is not None}
        for tag, pol in (("base", base_pol), ("fair", fair_pol)):
            if pol is None:
                row[f"recall_{groups[0]}_{tag}"] = row[f"recall_{groups[1]}_{tag}"] = float("nan")
                continue
            rep = utility_report(pol, cohort, split=split)
            for g in groups:
                row[f"recall_{g}_{tag}"] = rep.by_group[g].recall if g in rep.by_group else float("nan")
        if base_sol is not None and fair_sol is not None:
            row["objective_base"] = base_sol.objective
            row["objective_fair"] = fair_sol.objective
            row["pct_variance_increase"] = 100.0 * (fair_sol.objective - base_sol.objective) / base_sol.objective
            row["realized_gap"] = group_gap(fair_sol.p, train.u, train.group, groups, metric)
        else:
            row["objective_base"] = row["objective_fair"] = row["pct_variance_increase"] = row["realized_gap"] = float("nan")
        return row

    grid = np.asarray(c_grid, dtype=float)
    with ThreadPoolExecutor(max_workers=workers or default_workers()) as pool:
        return list(pool.map(level, grid))
