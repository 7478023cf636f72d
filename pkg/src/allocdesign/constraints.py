"""Constraint families, design problems and feasibility checks.

Every constraint is stored in the normalised form ``E[g(p, X)] <= rhs`` with
``g(p, X) = offset(X) + coef(X) * p``, ``g`` in [0, 1] and ``|coef| <= 1``.
The coefficient rule depends only on an individual's ``u`` and group label,
plus constants frozen from the design sample, so a policy can recompute it
for any new arrival.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np
from scipy import optimize

from .cohort import Cohort
from .errors import ConfigError

UTILITY_FLOOR = "utility_floor"
BUDGET_CAP = "budget_cap"
FAIRNESS_UTILITY = "fairness_utility"
FAIRNESS_RATE = "fairness_rate"
GENERIC_LINEAR = "generic_linear"
KINDS = (UTILITY_FLOOR, BUDGET_CAP, FAIRNESS_UTILITY, FAIRNESS_RATE, GENERIC_LINEAR)

DEFAULT_GAMMA = 0.01


def _as_group_array(group, n):
    if group is None:
        return np.full(n, None, dtype=object)
    return np.asarray(group, dtype=object)


@dataclass(frozen=True)
class ConstraintSpec:
    """One normalised linear-in-p constraint ``E[offset + coef * p] <= rhs``.

    ``params`` holds everything needed to rebuild the coefficient rule
    (it is what a policy file stores).
    """

    kind: str
    rhs: float
    params: Mapping[str, Any] = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown constraint kind {self.kind!r}")
        if not np.isfinite(self.rhs):
            raise ConfigError("constraint rhs must be finite")

    @property
    def needs_group(self) -> bool:
        return self.kind in (FAIRNESS_UTILITY, FAIRNESS_RATE)

    def coef(self, u, group=None) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        kind, prm = self.kind, self.params
        if kind == UTILITY_FLOOR:
            return -u
        if kind == BUDGET_CAP:
            return np.ones_like(u)
        if kind == GENERIC_LINEAR:
            return prm["intercept"] + prm["slope"] * u
        # fairness pair member
        g = _as_group_array(group, u.shape[0] if u.ndim else 1).reshape(u.shape)
        g0, g1 = prm["groups"]
        p0, p1 = prm["probs"]
        w = u if kind == FAIRNESS_UTILITY else np.ones_like(u)
        member = (g == g0) / p0 - (g == g1) / p1
        return prm["direction"] * prm["scale"] * w * member

    def offset(self, u, group=None) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == UTILITY_FLOOR:
            return np.ones_like(u)
        if self.kind == BUDGET_CAP:
            return np.zeros_like(u)
        if self.kind == GENERIC_LINEAR and self.params.get("offset") is not None:
            return np.full_like(u, float(self.params["offset"]))
        return np.maximum(0.0, -self.coef(u, group))

    def g(self, p, u, group=None) -> np.ndarray:
        return self.offset(u, group) + self.coef(u, group) * np.asarray(p, dtype=float)

    def value(self, p, u, group=None) -> float:
        """Sample mean of ``g`` (the left-hand side of the constraint)."""
        return float(np.mean(self.g(p, u, group)))

    def slack(self, p, u, group=None) -> float:
        return self.rhs - self.value(p, u, group)

    def to_dict(self):
        params = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.params.items()}
        return {"kind": self.kind, "rhs": self.rhs, "params": params, "label": self.label}

    @classmethod
    def from_dict(cls, d):
        params = dict(d.get("params", {}))
        for key in ("groups", "probs"):
            if key in params:
                params[key] = tuple(params[key])
        return cls(d["kind"], float(d["rhs"]), params, d.get("label", ""))


def make_utility_floor(c: float) -> ConstraintSpec:
    """``E[p u] >= c`` encoded as ``E[1 - u p] <= 1 - c``."""
    if not 0.0 <= c <= 1.0:
        raise ConfigError(f"utility level must lie in [0, 1], got {c}")
    return ConstraintSpec(UTILITY_FLOOR, 1.0 - c, {"c": float(c)}, f"utility>={c:g}")


def make_budget_cap(b: float) -> ConstraintSpec:
    """``E[p] <= b``."""
    if not 0.0 < b <= 1.0:
        raise ConfigError(f"budget must lie in (0, 1], got {b}")
    return ConstraintSpec(BUDGET_CAP, float(b), {"b": float(b)}, f"budget<={b:g}")


def make_generic_linear(intercept, slope, rhs, offset=None, label="linear") -> ConstraintSpec:
    """``E[offset + (intercept + slope u) p] <= rhs`` for ``u`` in [0, 1].

    ``offset`` defaults to ``max(0, -coef)`` per individual.
    """
    ends = (intercept, intercept + slope)
    if max(abs(e) for e in ends) > 1.0 + 1e-12:
        raise ConfigError("generic coefficient must satisfy |coef| <= 1 on u in [0, 1]")
    if offset is not None and not (max(0.0, -min(ends)) - 1e-12 <= offset <= min(1.0, 1.0 - max(ends)) + 1e-12):
        raise ConfigError("offset would push g outside [0, 1]")
    params = {"intercept": float(intercept), "slope": float(slope), "offset": offset}
    return ConstraintSpec(GENERIC_LINEAR, float(rhs), params, label)


def make_fairness_pair(metric, groups, eps, cohort: Cohort):
    """Two one-sided constraints bounding the between-group gap by ``eps``.

    The gap is in ``E[p u | G]`` (``metric="utility"``) or ``E[p | G]``
    (``metric="rate"``). Group probabilities come from ``cohort`` and are
    frozen into the returned specs; both constraints are multiplied by the
    smaller group probability so coefficients stay within [-1, 1].
    """
    if metric not in ("utility", "rate"):
        raise ConfigError(f"fairness metric must be 'utility' or 'rate', got {metric!r}")
    if eps < 0:
        raise ConfigError("eps must be nonnegative")
    g0, g1 = (str(g) for g in groups)
    if g0 == g1:
        raise ConfigError("fairness groups must differ")
    probs = (cohort.group_probability(g0), cohort.group_probability(g1))
    for label, pr in zip((g0, g1), probs):
        if pr <= 0:
            raise ConfigError(f"group {label!r} is empty in the design cohort")
    scale = min(probs)
    kind = FAIRNESS_UTILITY if metric == "utility" else FAIRNESS_RATE
    specs = []
    for direction in (1, -1):
        params = {"groups": (g0, g1), "probs": probs, "scale": scale, "direction": direction, "eps": float(eps)}
        spec = ConstraintSpec(kind, 0.0, params)
        rhs = scale * eps + float(np.mean(spec.offset(cohort.u, cohort.group)))
        sign = "+" if direction > 0 else "-"
        specs.append(ConstraintSpec(kind, rhs, params, f"{metric}-gap{sign}({g0},{g1})<={eps:g}"))
    return tuple(specs)


def group_gap(p, u, group, groups, metric="utility") -> float:
    """Realised ``E[p w | G0] - E[p w | G1]`` with ``w = u`` or 1."""
    p = np.asarray(p, dtype=float)
    w = np.asarray(u, dtype=float) if metric == "utility" else np.ones_like(p)
    group = np.asarray(group, dtype=object)
    m0, m1 = group == groups[0], group == groups[1]
    return float(np.mean((p * w)[m0]) - np.mean((p * w)[m1]))


@dataclass(frozen=True)
class Estimand:
    """ATE over everyone, or a GATE over ``S = {u >= u_min}`` and/or ``group in groups``."""

    kind: str = "ate"
    u_min: float | None = None
    groups: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("ate", "gate"):
            raise ConfigError(f"estimand must be 'ate' or 'gate', got {self.kind!r}")
        if self.kind == "gate" and self.u_min is None and not self.groups:
            raise ConfigError("a GATE needs u_min and/or groups to define its target set")

    def mask(self, u, group=None) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        m = np.ones(u.shape, dtype=bool)
        if self.kind == "ate":
            return m
        if self.u_min is not None:
            m &= u >= self.u_min
        if self.groups:
            m &= np.isin(_as_group_array(group, u.size).reshape(u.shape), list(self.groups))
        return m

    def to_dict(self):
        return {"type": self.kind, "u_min": self.u_min, "groups": None if self.groups is None else list(self.groups)}

    @classmethod
    def from_dict(cls, d, cohort: Cohort | None = None):
        kind = d.get("type", "ate")
        u_min = d.get("u_min")
        if kind == "gate" and "top_fraction" in d:
            if cohort is None:
                raise ConfigError("top_fraction needs a cohort to freeze its threshold")
            u_min = float(np.quantile(cohort.u, 1.0 - float(d["top_fraction"])))
        groups = d.get("groups")
        return cls(kind, None if u_min is None else float(u_min), None if groups is None else tuple(groups))

    @classmethod
    def top_fraction(cls, cohort: Cohort, fraction: float) -> "Estimand":
        """GATE over the ``fraction`` of ``cohort`` with the highest ``u``."""
        return cls("gate", float(np.quantile(cohort.u, 1.0 - fraction)))


ATE = Estimand()


class DesignProblem:
    """A design sample, its constraints, the box parameter and the estimand.

    The coefficient matrix ``coef`` (n x J), the effective right-hand sides
    ``rhs - mean(offset)`` and the objective weights are materialised once
    here since the solver evaluates them on every iteration.
    """

    def __init__(self, cohort: Cohort, constraints: Sequence[ConstraintSpec] = (), gamma=DEFAULT_GAMMA, estimand=ATE):
        if not 0.0 < gamma < 0.5:
            raise ConfigError(f"gamma must lie in (0, 0.5), got {gamma}")
        self.cohort = cohort
        self.constraints = tuple(constraints)
        self.gamma = float(gamma)
        self.estimand = estimand
        u, group = cohort.u, cohort.group
        if any(c.needs_group for c in self.constraints) and group is None:
            raise ConfigError("fairness constraints need group labels")
        n = len(cohort)
        self.coef = np.column_stack([c.coef(u, group) for c in self.constraints]) if self.constraints else np.zeros((n, 0))
        self.offset_mean = np.array([float(np.mean(c.offset(u, group))) for c in self.constraints])
        self.rhs = np.array([c.rhs for c in self.constraints], dtype=float)
        self.rhs_eff = self.rhs - self.offset_mean
        mask = estimand.mask(u, group)
        pr_s = float(np.mean(mask))
        if pr_s <= 0:
            raise ConfigError("the GATE target set is empty in the design cohort")
        self.target_probability = pr_s
        self.weights = mask / pr_s

    @property
    def n(self):
        return len(self.cohort)

    @property
    def J(self):
        return len(self.constraints)

    def constraint_values(self, p) -> np.ndarray:
        """Sample means of every ``g_j`` under probabilities ``p``."""
        return self.offset_mean + (self.coef.T @ np.asarray(p, dtype=float)) / self.n

    def violations(self, p) -> np.ndarray:
        return self.constraint_values(p) - self.rhs

    def objective(self, p) -> float:
        """Weighted surrogate ``mean(w * (1/p + 1/(1-p)))``."""
        p = np.asarray(p, dtype=float)
        return float(np.mean(self.weights * (1.0 / p + 1.0 / (1.0 - p))))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.cohort.u).tobytes())
        if self.cohort.group is not None:
            h.update("\x1f".join("" if g is None else g for g in self.cohort.group).encode())
        payload = {
            "constraints": [c.to_dict() for c in self.constraints],
            "gamma": self.gamma,
            "estimand": self.estimand.to_dict(),
        }
        h.update(json.dumps(payload, sort_keys=True).encode())
        return h.hexdigest()


def max_achievable_utility(u, budget, gamma) -> float:
    """Largest ``mean(p u)`` with ``mean(p) <= budget`` and ``p`` in [gamma, 1-gamma].

    Greedy fractional knapsack: everyone starts at ``gamma`` and the spare
    budget lifts the highest-``u`` individuals to ``1 - gamma``.
    """
    u = np.sort(np.asarray(u, dtype=float))[::-1]
    n = u.size
    if budget < gamma:
        return -np.inf
    spare = min(budget, 1.0 - gamma) * n - gamma * n
    width = 1.0 - 2.0 * gamma
    if width <= 0:
        return float(gamma * u.mean())
    units = spare / width
    k = int(np.floor(units))
    lifted = u[:k].sum() + (units - k) * (u[k] if k < n else 0.0)
    return float(gamma * u.mean() + width * lifted / n)


@dataclass(frozen=True)
class Feasibility:
    feasible: bool
    witness: Any = None
    max_utility: float | None = None

    def __bool__(self):
        return self.feasible


def _lp_feasibility(problem: DesignProblem) -> Feasibility:
    # minimise t subject to mean(coef_j p) - t <= rhs_eff_j, p in box
    n, J = problem.coef.shape
    gamma = problem.gamma
    c = np.zeros(n + 1)
    c[-1] = 1.0
    a_ub = np.hstack([problem.coef.T / n, -np.ones((J, 1))])
    bounds = [(gamma, 1.0 - gamma)] * n + [(None, None)]
    res = optimize.linprog(c, A_ub=a_ub, b_ub=problem.rhs_eff, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"feasibility LP failed: {res.message}")
    t = float(res.x[-1])
    if t <= 1e-9:
        return Feasibility(True)
    viol = a_ub[:, :n] @ res.x[:n] - problem.rhs_eff
    worst = int(np.argmax(viol))
    return Feasibility(False, {"constraint": problem.constraints[worst].label, "min_max_violation": t})


def check_feasibility(problem: DesignProblem) -> Feasibility:
    """Decide whether any policy satisfies every constraint on the design sample.

    A single utility floor plus at most one budget cap is settled in closed
    form against :func:`max_achievable_utility`; anything else goes to a
    small linear program over ``p``.
    """
    kinds = [c.kind for c in problem.constraints]
    if not kinds:
        return Feasibility(True)
    simple = set(kinds) <= {UTILITY_FLOOR, BUDGET_CAP} and kinds.count(UTILITY_FLOOR) <= 1 and kinds.count(BUDGET_CAP) <= 1
    if not simple:
        return _lp_feasibility(problem)
    gamma = problem.gamma
    budget = next((c.params["b"] for c in problem.constraints if c.kind == BUDGET_CAP), 1.0)
    if budget < gamma:
        return Feasibility(False, {"constraint": "budget", "min_budget": gamma})
    u_star = max_achievable_utility(problem.cohort.u, budget, gamma)
    floor = next((c.params["c"] for c in problem.constraints if c.kind == UTILITY_FLOOR), None)
    if floor is not None and floor > u_star + 1e-12:
        return Feasibility(False, {"constraint": "utility", "max_utility": u_star}, u_star)
    return Feasibility(True, None, u_star)


def problem_from_config(config: Mapping[str, Any], cohort: Cohort) -> DesignProblem:
    """Build a design problem from the JSON configuration layout.

    ``cohort`` is the design (train) sample; fairness group probabilities
    and GATE quantile thresholds are frozen from it.
    """
    constraints = []
    for item in config.get("constraints", []):
        kind = item.get("kind")
        try:
            if kind == "utility_floor":
                constraints.append(make_utility_floor(float(item["c"])))
            elif kind == "budget_cap":
                constraints.append(make_budget_cap(float(item["b"])))
            elif kind == "fairness":
                constraints.extend(
                    make_fairness_pair(item.get("metric", "utility"), item["groups"], float(item.get("eps", 0.02)), cohort)
                )
            elif kind == "generic_linear":
                constraints.append(
                    make_generic_linear(item["intercept"], item["slope"], item["rhs"], item.get("offset"), item.get("label", "linear"))
                )
            else:
                raise ConfigError(f"unknown constraint kind {kind!r}")
        except KeyError as exc:
            raise ConfigError(f"constraint {kind!r} is missing field {exc.args[0]!r}") from None
    estimand = Estimand.from_dict(config.get("estimand", {"type": "ate"}), cohort)
    return DesignProblem(cohort, constraints, float(config.get("gamma", DEFAULT_GAMMA)), estimand)
