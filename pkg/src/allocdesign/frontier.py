"""Utility/sample-size frontier sweeps, the 90%-utility point and bootstrap bands."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .cohort import EVAL, Cohort, OutcomeModel
from .constraints import (
    ATE,
    DEFAULT_GAMMA,
    ConstraintSpec,
    DesignProblem,
    Estimand,
    make_budget_cap,
    make_fairness_pair,
    make_utility_floor,
    max_achievable_utility,
)
from .dual import SolverOptions, solve_dual
from .errors import InfeasibleDesign
from .evaluator import efficiency_variance, need_based_probabilities, pointwise_terms, probabilities_for, utility_report, view
from .policy import Policy
from .power import PowerSpec, RCTBenchmark, RDBenchmark, rct_benchmark, rd_benchmark, wald_sample_size

logger = logging.getLogger(__name__)

DEFAULT_GRID_SIZE = 25


@dataclass(frozen=True)
class DesignTemplate:
    """Everything about a design except the utility floor.

    ``estimand`` may be an :class:`Estimand` or its config dict (a
    ``top_fraction`` GATE is frozen against the design sample);
    ``fairness`` is ``{"metric", "groups", "eps"}`` or ``None``.
    """

    budget: float
    gamma: float = DEFAULT_GAMMA
    estimand: Any = ATE
    fairness: Mapping[str, Any] | None = None
    extra: tuple[ConstraintSpec, ...] = ()

    def resolve_estimand(self, train: Cohort) -> Estimand:
        if isinstance(self.estimand, Estimand):
            return self.estimand
        return Estimand.from_dict(self.estimand, train)

    def problem(self, train: Cohort, c: float | None) -> DesignProblem:
        constraints = [] if c is None else [make_utility_floor(c)]
        constraints.append(make_budget_cap(self.budget))
        if self.fairness:
            f = self.fairness
            constraints.extend(make_fairness_pair(f.get("metric", "utility"), f["groups"], float(f.get("eps", 0.02)), train))
        constraints.extend(self.extra)
        return DesignProblem(train, constraints, self.gamma, self.resolve_estimand(train))


@dataclass(frozen=True)
class DesignPoint:
    c: float
    recall: float
    expected_utility: float
    surrogate: float
    v_ate: float
    n_required: int
    lam: np.ndarray
    feasible: bool = True
    converged: bool = True
    policy: Policy | None = field(default=None, repr=False, compare=False)

    @classmethod
    def infeasible(cls, c):
        nan = float("nan")
        return cls(c, nan, nan, nan, nan, -1, np.array([]), feasible=False, converged=False)


@dataclass(frozen=True)
class NeedBasedAnchor:
    recall: float
    expected_utility: float


@dataclass
class Frontier:
    points: list[DesignPoint]
    rct: RCTBenchmark | None = None
    need_based: NeedBasedAnchor | None = None
    rd: RDBenchmark | None = None
    ninety_pct: DesignPoint | None = None
    bands: list[dict] | None = None
    budget: float = float("nan")
    cohort: Cohort | None = field(default=None, repr=False)
    model: OutcomeModel | None = field(default=None, repr=False)
    spec: PowerSpec | None = field(default=None, repr=False)
    split: str | None = EVAL

    @property
    def feasible_points(self) -> list[DesignPoint]:
        return [p for p in self.points if p.feasible]


def default_grid(train: Cohort, budget: float, gamma: float, size=DEFAULT_GRID_SIZE) -> np.ndarray:
    """``size`` levels from ``budget * mean(u)`` (uniform randomisation) to ``0.999 U*``."""
    lo = budget * float(np.mean(train.u))
    hi = 0.999 * max_achievable_utility(train.u, budget, gamma)
    return np.linspace(lo, hi, size)


def evaluate_policy(policy, cohort: Cohort, model: OutcomeModel, spec: PowerSpec, c, lam, surrogate, split=EVAL, converged=True):
    util = utility_report(policy, cohort, split=split)
    var = efficiency_variance(policy, cohort, model, split=split)
    return DesignPoint(
        float(c),
        util.recall,
        util.expected_utility,
        surrogate,
        var.v_ate,
        wald_sample_size(var.v_ate, spec),
        np.asarray(lam, dtype=float),
        True,
        converged,
        policy if isinstance(policy, Policy) else None,
    )


def sweep(
    cohort: Cohort,
    model: OutcomeModel,
    template: DesignTemplate,
    c_grid: Sequence[float] | None = None,
    *,
    spec: PowerSpec | None = None,
    benchmarks=True,
    warm_start=True,
    options: SolverOptions | None = None,
    seed=0,
    split=EVAL,
) -> Frontier:
    """Solve the design at each utility level and evaluate it.

    Designs are solved on the cohort's train rows and evaluated on
    ``split``. Infeasible levels are kept as points with ``feasible=False``.
    With ``benchmarks`` the RCT, need-based and RD anchors are attached.
    """
    train = cohort.train()
    rows = view(cohort, split)
    spec = spec or PowerSpec.for_model(model, rows)
    grid = default_grid(train, template.budget, template.gamma) if c_grid is None else np.asarray(c_grid, dtype=float)
    if np.any(np.diff(grid) < 0):
        raise ValueError("c_grid must be sorted")
    points = []
    lam = None
    for c in grid:
        problem = template.problem(train, float(c))
        try:
            sol = solve_dual(problem, options, lam0=lam if warm_start else None)
        except InfeasibleDesign as exc:
            logger.info("c=%.6g infeasible: %s", c, exc)
            points.append(DesignPoint.infeasible(float(c)))
            continue
        lam = sol.lam
        policy = Policy.from_solution(problem, sol)
        points.append(evaluate_policy(policy, cohort, model, spec, c, sol.lam, sol.objective, split, sol.converged))
    frontier = Frontier(points, budget=template.budget, cohort=cohort, model=model, spec=spec, split=split)
    if benchmarks:
        frontier.rct = rct_benchmark(cohort, model, template.budget, spec, split=split)
        need = need_based_probabilities(rows.u, template.budget)
        util = utility_report(need, rows, split=None)
        frontier.need_based = NeedBasedAnchor(util.recall, util.expected_utility)
        frontier.rd = rd_benchmark(cohort, model, template.budget, spec, seed=seed, split=split)
        frontier.ninety_pct = ninety_percent_point(frontier)
    return frontier


def ninety_percent_point(frontier: Frontier, fraction=0.9) -> DesignPoint | None:
    """First point reaching ``fraction`` of need-based recall, interpolated in ``c``.

    Returns ``None`` when no point reaches the target. If the first
    feasible point already exceeds it, that point is returned unchanged.
    """
    if frontier.need_based is None:
        raise ValueError("frontier has no need-based anchor")
    target = fraction * frontier.need_based.recall
    pts = frontier.feasible_points
    for k, pt in enumerate(pts):
        if pt.recall < target:
            continue
        if k == 0 or pt.recall == target:
            return pt
        prev = pts[k - 1]
        s = (target - prev.recall) / (pt.recall - prev.recall)

        def lerp(a, b):
            return a + s * (b - a)

        v = lerp(prev.v_ate, pt.v_ate)
        n = wald_sample_size(v, frontier.spec) if frontier.spec is not None else int(round(lerp(prev.n_required, pt.n_required)))
        return DesignPoint(
            lerp(prev.c, pt.c),
            target,
            lerp(prev.expected_utility, pt.expected_utility),
            lerp(prev.surrogate, pt.surrogate),
            v,
            n,
            lerp(prev.lam, pt.lam),
            True,
            prev.converged and pt.converged,
            None,
        )
    return None


MULTIPLIER_LAWS = ("gaussian", "rademacher")


def _multipliers(rng, law, shape):
    if law == "gaussian":
        return rng.standard_normal(shape)
    if law == "rademacher":
        return rng.integers(0, 2, size=shape) * 2.0 - 1.0
    raise ValueError(f"unknown multiplier law {law!r}; choose from {MULTIPLIER_LAWS}")


def multiplier_bootstrap(values, replicates=10_000, law="gaussian", seed=None, chunk=256) -> np.ndarray:
    """Bootstrap draws of sample means by perturbing with random multipliers.

    ``values`` is ``(n,)`` or ``(n, K)``; column ``k``'s draws are
    ``mean(values[:, k]) + mean(xi * (values[:, k] - mean))`` with i.i.d.
    mean-zero, unit-variance multipliers ``xi`` shared across columns.
    Returns an array of shape ``(replicates, K)`` (or ``(replicates,)``).
    """
    f = np.asarray(values, dtype=float)
    squeeze = f.ndim == 1
    f = f.reshape(f.shape[0], -1)
    n = f.shape[0]
    theta = f.mean(axis=0)
    centred = f - theta
    rng = np.random.default_rng(seed)
    out = np.empty((replicates, f.shape[1]))
    for start in range(0, replicates, chunk):
        m = min(chunk, replicates - start)
        xi = _multipliers(rng, law, (m, n))
        out[start : start + m] = theta + xi @ centred / n
    return out[:, 0] if squeeze else out


def percentile_band(draws, level=0.95):
    tail = 100 * (1 - level) / 2
    lo, hi = np.percentile(draws, [tail, 100 - tail], axis=0)
    return lo, hi


def recall_influence(p, mu0) -> np.ndarray:
    """Per-unit values whose mean is the recall and whose spread is its delta-method variance."""
    mu0 = np.asarray(mu0, dtype=float)
    r = float(np.sum(p * mu0) / np.sum(mu0))
    return r + (p - r) * mu0 / mu0.mean()


def bootstrap_bands(frontier: Frontier, replicates=10_000, law="gaussian", seed=None, level=0.95) -> list[dict]:
    """Percentile bands for recall, ``v_ate`` and ``n_required`` at every point.

    Dual prices stay fixed; only the evaluation averages are resampled.
    The ``n_required`` band maps the ``v_ate`` band through the Wald formula.
    """
    rows = view(frontier.cohort, frontier.split)
    model, spec = frontier.model, frontier.spec
    cols, owners = [], []
    for k, pt in enumerate(frontier.points):
        if not pt.feasible or pt.policy is None:
            continue
        p = probabilities_for(pt.policy, rows)
        est = pt.policy.estimand
        mask = est.mask(rows.u, rows.group)
        terms = np.zeros(len(rows))
        terms[mask] = pointwise_terms(p[mask], rows.mu0[mask], model, float(np.mean(model.cate(rows.mu0[mask]))))
        terms = terms * (len(rows) / mask.sum())
        cols.extend([recall_influence(p, rows.mu0), terms])
        owners.append(k)
    bands: list[dict] = [dict() for _ in frontier.points]
    if cols:
        draws = multiplier_bootstrap(np.column_stack(cols), replicates, law, seed)
        lo, hi = percentile_band(draws, level)
        for j, k in enumerate(owners):
            r_lo, r_hi = lo[2 * j], hi[2 * j]
            v_lo, v_hi = lo[2 * j + 1], hi[2 * j + 1]
            bands[k] = {
                "recall": (float(r_lo), float(r_hi)),
                "v_ate": (float(v_lo), float(v_hi)),
                "n_required": (wald_sample_size(v_lo, spec), wald_sample_size(v_hi, spec)),
            }
    frontier.bands = bands
    return bands


FRONTIER_FIELDS = ["c", "recall", "recall_lo", "recall_hi", "v_ate", "n_required", "n_lo", "n_hi"]
ANCHOR_FIELDS = ["design", "n_required", "recall", "deff", "bandwidth", "f_h"]


def frontier_rows(frontier: Frontier) -> list[dict]:
    with_bands = frontier.bands is not None
    rows = []
    for k, pt in enumerate(frontier.points):
        row = {"c": pt.c, "recall": pt.recall, "v_ate": pt.v_ate, "n_required": pt.n_required if pt.feasible else ""}
        if with_bands:
            b = frontier.bands[k]
            if b:
                row.update(
                    recall_lo=b["recall"][0], recall_hi=b["recall"][1], n_lo=b["n_required"][0], n_hi=b["n_required"][1]
                )
            else:
                row.update(recall_lo="", recall_hi="", n_lo="", n_hi="")
        rows.append(row)
    return rows


def anchor_rows(frontier: Frontier) -> list[dict]:
    rows = []
    if frontier.rct is not None:
        rows.append({"design": "rct", "n_required": frontier.rct.n_required, "recall": frontier.rct.recall, "deff": 1.0, "bandwidth": "", "f_h": 1.0})
    if frontier.need_based is not None:
        rows.append({"design": "need_based", "n_required": "", "recall": frontier.need_based.recall, "deff": "", "bandwidth": "", "f_h": ""})
    if frontier.rd is not None:
        rd = frontier.rd
        recall = frontier.need_based.recall if frontier.need_based else ""
        rows.append({"design": "rd", "n_required": rd.n_required, "recall": recall, "deff": rd.deff, "bandwidth": rd.bandwidth, "f_h": rd.fraction_in_bandwidth})
    if frontier.ninety_pct is not None:
        pt = frontier.ninety_pct
        rows.append({"design": "ninety_pct", "n_required": pt.n_required, "recall": pt.recall, "deff": "", "bandwidth": "", "f_h": ""})
    return rows


def write_table(rows: list[dict], path, fields: Sequence[str], delimiter=","):
    present = [f for f in fields if any(f in r for r in rows)] if rows else list(fields)
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=present, delimiter=delimiter, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def frontier_svg(frontier: Frontier) -> str:
    """Recall against required sample size, with the anchors, as standalone SVG."""
    import io
    import json

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pts = frontier.feasible_points
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot([p.n_required for p in pts], [p.recall for p in pts], color="tab:blue", label="optimised designs")
    if frontier.bands:
        band = [(p, b) for p, b in zip(frontier.points, frontier.bands) if b]
        if band:
            ax.fill_betweenx(
                [p.recall for p, _ in band],
                [b["n_required"][0] for _, b in band],
                [b["n_required"][1] for _, b in band],
                color="tab:blue",
                alpha=0.2,
            )
    if frontier.rct is not None:
        ax.scatter([frontier.rct.n_required], [frontier.rct.recall], color="purple", zorder=3, label="RCT")
    if frontier.need_based is not None:
        ax.axhline(frontier.need_based.recall, color="gray", linestyle="--", label="need-based")
    if frontier.rd is not None and frontier.need_based is not None:
        ax.scatter([frontier.rd.n_required], [frontier.need_based.recall], marker="D", color="goldenrod", zorder=3, label="RD")
    if frontier.ninety_pct is not None:
        ax.scatter([frontier.ninety_pct.n_required], [frontier.ninety_pct.recall], marker="^", color="red", zorder=3, label="90% utility")
    ax.set_xlabel("sample size required")
    ax.set_ylabel("recall")
    ax.set_title(f"budget b = {frontier.budget:g}")
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    buf = io.StringIO()
    fig.savefig(buf, format="svg")
    plt.close(fig)
    svg = buf.getvalue()
    data = json.dumps({"points": frontier_rows(frontier), "anchors": anchor_rows(frontier)}, default=str)
    comment = "<!-- frontier-data " + data.replace("--", "- -") + " -->\n"
    head_end = svg.index("?>") + 2 if svg.startswith("<?xml") else 0
    return svg[:head_end] + "\n" + comment + svg[head_end:].lstrip("\n")


def required_sample_ratio(point: DesignPoint | None, rct: RCTBenchmark) -> float:
    return math.nan if point is None else point.n_required / rct.n_required
