"""Sample dual of the variance-minimising design problem.

For dual prices ``lam`` every individual solves its own one-dimensional
problem ``min_p w f(p) + a p`` over ``[gamma, 1 - gamma]`` with
``f(p) = 1/p + 1/(1-p)`` and ``a = sum_j lam_j coef_j(X)``. The dual value is
the average of those minima minus ``lam . rhs_eff``; it is concave in ``lam``
with gradient ``mean_i g(p_i) - rhs`` (Danskin).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .constraints import DesignProblem
from .errors import InfeasibleDesign

logger = logging.getLogger(__name__)

# f''(p) = 2/p^3 + 2/(1-p)^3 >= 32 on (0, 1); bounds how fast p moves with lam.
CURVATURE_LOWER_BOUND = 32.0
ZERO_WEIGHT_SMOOTHING = 1e-6


def surrogate(p):
    """``1/p + 1/(1-p)``."""
    p = np.asarray(p, dtype=float)
    return 1.0 / p + 1.0 / (1.0 - p)


def _dsurrogate(p):
    return -1.0 / p**2 + 1.0 / (1.0 - p) ** 2


def _d2surrogate(p):
    return 2.0 / p**3 + 2.0 / (1.0 - p) ** 3


def inner_solve(a, gamma, weight=1.0):
    """Minimiser of ``weight * f(p) + a * p`` over ``[gamma, 1 - gamma]``.

    Vectorised over ``a`` (and ``weight``). The stationarity condition
    ``weight * f'(p) + a = 0`` has a strictly increasing left side, so the
    root is bracketed and found by Newton steps that fall back to bisection
    whenever they leave the bracket; the result is then clamped to the box.
    Zero-weight entries (outside a GATE target set) would minimise a
    linear function and jump between the box edges as ``a`` changes sign,
    which makes the dual nondifferentiable. They are instead given the
    tiny weight ``ZERO_WEIGHT_SMOOTHING``, so any ``|a|`` above roughly
    ``1e-2`` still lands on the edge while small prices move them smoothly.
    """
    a_arr = np.asarray(a, dtype=float)
    w = np.broadcast_to(np.asarray(weight, dtype=float), a_arr.shape)
    scalar = a_arr.ndim == 0
    a_arr = np.atleast_1d(a_arr)
    w = np.atleast_1d(w)
    a_eff = a_arr / np.where(w <= 0, ZERO_WEIGHT_SMOOTHING, w)
    lo_edge, hi_edge = gamma, 1.0 - gamma
    at_lo = _dsurrogate(lo_edge) + a_eff >= 0
    at_hi = _dsurrogate(hi_edge) + a_eff <= 0
    lo = np.full(a_eff.shape, lo_edge)
    hi = np.full(a_eff.shape, hi_edge)
    p = np.full(a_eff.shape, 0.5)
    active = ~(at_lo | at_hi)
    for _ in range(200):
        if not active.any():
            break
        pa = p[active]
        d = _dsurrogate(pa) + a_eff[active]
        lo[active] = np.where(d < 0, pa, lo[active])
        hi[active] = np.where(d > 0, pa, hi[active])
        step = pa - d / _d2surrogate(pa)
        outside = (step <= lo[active]) | (step >= hi[active])
        step = np.where(outside, 0.5 * (lo[active] + hi[active]), step)
        moved = np.abs(step - pa)
        p[active] = step
        done = (d == 0) | (moved <= 4 * np.finfo(float).eps * np.maximum(step, 1e-300))
        idx = np.flatnonzero(active)
        active[idx[done]] = False
    out = np.where(at_lo, lo_edge, np.where(at_hi, hi_edge, p))

    return float(out[0]) if scalar else out


@dataclass(frozen=True)
class SolverOptions:
    """Knobs of the projected ascent on the dual.

    ``step_init`` caps the first step length; later steps may grow by 10x.
    """

    tol: float = 1e-6
    max_iters: int = 500
    lambda_ceiling: float = 1e6
    step_init: float = 1.0

    @classmethod
    def from_dict(cls, d):
        known = {k: d[k] for k in ("tol", "max_iters", "lambda_ceiling", "step_init") if k in d}
        return cls(**known)


@dataclass(frozen=True)
class DualSolution:
    lam: np.ndarray
    kkt_residual: float
    iterations: int
    converged: bool
    dual_value: float
    objective: float
    constraint_values: np.ndarray
    p: np.ndarray = field(repr=False)

    @property
    def lambda_inf_norm(self) -> float:
        return float(np.max(self.lam)) if self.lam.size else 0.0


class _Dual:
    """Cached evaluations of the sample dual for one problem."""

    def __init__(self, problem: DesignProblem):
        self.pb = problem
        self.coef = problem.coef
        self.w = np.where(problem.weights > 0, problem.weights, ZERO_WEIGHT_SMOOTHING)
        self.gamma = problem.gamma
        self.rhs_eff = problem.rhs_eff

    def evaluate(self, lam):
        a = self.coef @ lam if lam.size else np.zeros(self.pb.n)
        p = inner_solve(a, self.gamma, self.w)
        value = float(np.mean(self.w * surrogate(p) + a * p) - lam @ self.rhs_eff)
        grad = (self.coef.T @ p) / self.pb.n - self.rhs_eff
        return value, grad, p

    def hessian(self, p):
        # d p_i / d lam = -coef_i / (w_i f''(p_i)) for interior, positive-weight i
        g = self.gamma
        interior = (p > g) & (p < 1.0 - g)
        if not interior.any():
            return np.zeros((self.pb.J, self.pb.J))
        c = self.coef[interior]
        scale = 1.0 / (self.w[interior] * _d2surrogate(p[interior]))
        return -(c.T * scale) @ c / self.pb.n


def kkt_residual(lam, grad):
    """``max_j |min(lam_j, slack_j)|`` with ``slack = -grad``."""
    if lam.size == 0:
        return 0.0
    return float(np.max(np.abs(np.minimum(lam, -grad))))


def solve_dual(problem: DesignProblem, options: SolverOptions | None = None, lam0=None) -> DualSolution:
    """Maximise the sample dual over ``lam >= 0``.

    Projected ascent with backtracking on the dual value. The ascent
    direction on the coordinates not pinned at zero is the gradient
    rescaled by the inverse of the (negated) dual curvature; when that
    fails to give ascent the plain gradient with step ``32 / (J max coef^2)``
    is used instead, which is safe because each ``p_i`` moves at most
    ``1/32`` per unit of price.

    Raises
    ------
    InfeasibleDesign
        If the prices exceed ``options.lambda_ceiling`` while a constraint
        remains violated.
    """
    opts = options or SolverOptions()
    dual = _Dual(problem)
    J = problem.J
    lam = np.zeros(J) if lam0 is None else np.maximum(np.asarray(lam0, dtype=float).copy(), 0.0)
    value, grad, p = dual.evaluate(lam)
    resid = kkt_residual(lam, grad)
    coef_sq = float(np.max(np.sum(problem.coef**2, axis=1))) if J else 0.0
    safe_step = CURVATURE_LOWER_BOUND * float(dual.w.min()) / coef_sq if coef_sq > 0 else 1.0
    radius = opts.step_init * max(1.0, float(np.max(lam, initial=0.0)))
    it = 0
    converged = resid <= opts.tol
    while not converged and it < opts.max_iters:
        it += 1
        pinned = (lam <= 0) & (grad <= 0)
        free = ~pinned
        direction = np.zeros(J)
        H = dual.hessian(p)[np.ix_(free, free)]
        gf = grad[free]
        try:
            reg = 1e-12 * max(1.0, float(np.max(np.abs(np.diag(H)), initial=0.0)))
            direction[free] = np.linalg.solve(-H + reg * np.eye(H.shape[0]), gf)
        except np.linalg.LinAlgError:
            direction[free] = gf
        if not np.all(np.isfinite(direction)) or direction @ grad <= 0:
            direction = np.where(free, grad, 0.0)
        norm = float(np.linalg.norm(direction))
        t = min(1.0, radius / norm) if norm > 0 else 0.0
        accepted = False
        for _ in range(60):
            trial = np.maximum(lam + t * direction, 0.0)
            tv, tg, tp = dual.evaluate(trial)
            if tv >= value + 1e-4 * grad @ (trial - lam) and tv >= value:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            trial = np.maximum(lam + safe_step * grad * free, 0.0)
            tv, tg, tp = dual.evaluate(trial)
            accepted = tv >= value
        if not accepted:
            logger.debug("iter=%d line search stalled residual=%.3e", it, resid)
            break
        step_len = float(np.linalg.norm(trial - lam))
        radius = max(radius, 10.0 * step_len)
        lam, value, grad, p = trial, tv, tg, tp
        resid = kkt_residual(lam, grad)
        logger.debug("iter=%d dual=%.12g residual=%.3e lam=%s", it, value, resid, np.array2string(lam, precision=6))
        converged = resid <= opts.tol
        if np.max(lam, initial=0.0) > opts.lambda_ceiling:
            j = int(np.argmax(np.where(grad > 0, lam, -np.inf)))
            if grad[j] <= 0:
                j = int(np.argmax(lam))
            raise InfeasibleDesign(
                f"dual prices diverged on constraint {problem.constraints[j].label!r}; "
                "the design is infeasible or badly conditioned",
                {"constraint": problem.constraints[j].label, "lambda": float(lam[j]), "violation": float(grad[j])},
            )
    if not converged:
        logger.warning("dual ascent stopped after %d iterations with residual %.3e", it, resid)
    return DualSolution(
        lam=lam,
        kkt_residual=resid,
        iterations=it,
        converged=converged,
        dual_value=value,
        objective=problem.objective(p),
        constraint_values=problem.constraint_values(p),
        p=p,
    )


def dual_norm_diagnostic(solution: DualSolution, alpha: float, beta_sb: float, gamma: float):
    """Compare ``max lam`` with the small-ball bound ``sqrt(2) / (alpha sqrt(beta) gamma^2)``.

    Advisory only; ``alpha`` and ``beta_sb`` are user-supplied.
    """
    if alpha <= 0 or not 0 < beta_sb <= 1:
        raise ValueError("need alpha > 0 and beta_sb in (0, 1]")
    bound = np.sqrt(2.0) / (alpha * np.sqrt(beta_sb) * gamma**2)
    return {"bound": float(bound), "satisfied": solution.lambda_inf_norm <= bound}
