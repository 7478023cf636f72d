"""Independent reference solvers used by the tests.

None of these reuse the package's dual machinery: they work on the primal
problem directly, either by brute force on a probability lattice or through
cvxpy's conic solvers.
"""

from __future__ import annotations

import itertools

import cvxpy as cp
import numpy as np


def surrogate(p):
    p = np.asarray(p, dtype=float)
    return 1.0 / p + 1.0 / (1.0 - p)


def lattice(gamma, step=0.001):
    lo = int(np.ceil(round(gamma / step, 9)))
    hi = int(np.floor(round((1.0 - gamma) / step, 9)))
    return np.arange(lo, hi + 1) * step


def grid_search(problem, step=0.001):
    """Exhaustive lattice search for ``n <= 2``.

    Returns ``(p, objective)`` of the best lattice point satisfying every
    constraint, or ``(None, inf)`` when no lattice point is feasible.
    """
    n = problem.n
    if n > 2:
        raise ValueError("exhaustive lattice search is only tractable for n <= 2")
    axis = lattice(problem.gamma, step)
    mesh = np.stack(np.meshgrid(*([axis] * n), indexing="ij"), axis=-1).reshape(-1, n)
    return _best_on(problem, mesh)


def _best_on(problem, mesh):
    w = problem.weights
    obj = (surrogate(mesh) * w).mean(axis=1)
    if problem.J:
        vals = problem.offset_mean + mesh @ problem.coef / problem.n
        ok = np.all(vals <= problem.rhs + 1e-12, axis=1)
    else:
        ok = np.ones(len(mesh), dtype=bool)
    if not ok.any():
        return None, np.inf
    k = np.flatnonzero(ok)[np.argmin(obj[ok])]
    return mesh[k], float(obj[k])


def cvxpy_primal(problem):
    """Continuous primal optimum via cvxpy; ``None`` if infeasible."""
    n, g = problem.n, problem.gamma
    p = cp.Variable(n)
    w = problem.weights
    cons = [p >= g, p <= 1 - g]
    if problem.J:
        cons.append(problem.offset_mean + problem.coef.T @ p / n <= problem.rhs)
    obj = cp.sum(cp.multiply(w, cp.inv_pos(p) + cp.inv_pos(1 - p))) / n
    prob = cp.Problem(cp.Minimize(obj), cons)
    for solver in ("CLARABEL", "ECOS", "SCS"):
        try:
            prob.solve(solver=solver)
            break
        except (cp.SolverError, ValueError):
            continue
    if prob.status not in ("optimal", "optimal_inaccurate"):
        return None, np.inf
    return np.clip(p.value, g, 1 - g), float(prob.value)


LOCAL_RADIUS = {3: 8, 4: 5, 5: 3, 6: 2}


def local_lattice_search(problem, step=0.001, radius=None):
    """Lattice search in a ``(2 radius + 1)^n`` box around the cvxpy optimum.

    Used where a full lattice is out of reach (``n >= 3``). The objective is
    strictly convex, so the best lattice point sits next to the continuous
    optimum; a box of a few steps contains it.
    """
    radius = radius or LOCAL_RADIUS.get(problem.n, 2)
    center, _ = cvxpy_primal(problem)
    if center is None:
        return None, np.inf
    axis = lattice(problem.gamma, step)
    idx = np.clip(np.searchsorted(axis, center), 0, axis.size - 1)
    ranges = [axis[max(0, i - radius - 1) : i + radius + 1] for i in idx]
    mesh = np.array(list(itertools.product(*ranges)))
    return _best_on(problem, mesh)


def lattice_optimum(problem, step=0.001):
    if problem.n <= 2:
        return grid_search(problem, step)
    return local_lattice_search(problem, step)


def lp_max_utility(u, budget, gamma):
    """max mean(p u) s.t. mean(p) <= budget, p in [gamma, 1-gamma], via cvxpy."""
    u = np.asarray(u, dtype=float)
    p = cp.Variable(u.size)
    prob = cp.Problem(cp.Maximize(u @ p / u.size), [p >= gamma, p <= 1 - gamma, cp.sum(p) / u.size <= budget])
    prob.solve(solver="CLARABEL")
    if prob.status not in ("optimal", "optimal_inaccurate"):
        return None
    return float(prob.value)


def lp_feasible(problem):
    """Whether the constraint polytope meets the probability box (cvxpy LP)."""
    n, g = problem.n, problem.gamma
    p = cp.Variable(n)
    cons = [p >= g, p <= 1 - g]
    if problem.J:
        cons.append(problem.offset_mean + problem.coef.T @ p / n <= problem.rhs)
    prob = cp.Problem(cp.Minimize(0), cons)
    prob.solve(solver="CLARABEL")
    return prob.status in ("optimal", "optimal_inaccurate")
