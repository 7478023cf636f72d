"""Targeting utility, efficiency-bound variances and trial simulation.

Functions here accept a ``policy`` that is either a :class:`~allocdesign.policy.Policy`,
a scalar probability (e.g. a uniform RCT), or an array of per-individual
probabilities aligned with the evaluated rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cohort import EVAL, Cohort, OutcomeModel
from .constraints import ATE, Estimand
from .dual import surrogate
from .policy import Policy


def view(cohort: Cohort, split=EVAL) -> Cohort:
    """The rows evaluated: a named split, or the whole cohort for ``None``."""
    return cohort if split is None else cohort.part(split)


def probabilities_for(policy, cohort: Cohort) -> np.ndarray:
    if isinstance(policy, Policy):
        return policy.on_cohort(cohort)
    p = np.asarray(policy, dtype=float)
    if p.ndim == 0:
        return np.full(len(cohort), float(p))
    if p.shape != (len(cohort),):
        raise ValueError("probability array does not match the evaluated rows")
    return p


def _estimand_of(policy, estimand):
    if estimand is not None:
        return estimand
    return policy.estimand if isinstance(policy, Policy) else ATE


@dataclass(frozen=True)
class UtilityReport:
    expected_utility: float
    recall: float
    budget_use: float
    by_group: dict = field(default_factory=dict)


def _utility_numbers(p, u, mu0):
    total_risk = float(np.sum(mu0))
    recall = float(np.sum(p * mu0) / total_risk) if total_risk > 0 else float("nan")
    return float(np.mean(p * u)), recall, float(np.mean(p))


def utility_report(policy, cohort: Cohort, split=EVAL) -> UtilityReport:
    """Expected utility ``E[p u]``, budget use ``E[p]`` and expected recall.

    Recall is the share of expected adverse baseline outcomes that receive
    treatment, ``sum(p mu0) / sum(mu0)``.
    """
    rows = view(cohort, split)
    p = probabilities_for(policy, rows)
    by_group = {}
    if rows.group is not None:
        for label in sorted({g for g in rows.group if g is not None}):
            m = rows.group == label
            by_group[label] = UtilityReport(*_utility_numbers(p[m], rows.u[m], rows.mu0[m]))
    return UtilityReport(*_utility_numbers(p, rows.u, rows.mu0), by_group)


def need_based_probabilities(u, budget) -> np.ndarray:
    """Deterministic targeting: treat the top ``budget`` share by ``u``.

    Ties at the cutoff are broken by row order so exactly ``round(budget n)``
    rows are treated.
    """
    u = np.asarray(u, dtype=float)
    k = int(round(budget * u.size))
    p = np.zeros(u.size)
    p[np.argsort(-u, kind="stable")[:k]] = 1.0
    return p


@dataclass(frozen=True)
class VarianceReport:
    """Efficiency bound of a design.

    ``v_ate`` is the bound itself when outcome variances come from an
    :class:`OutcomeModel`; with only a variance bound ``C`` it is the proxy
    ``C * surrogate`` (``source == "bound"``).
    """

    v_ate: float
    surrogate: float
    pointwise: np.ndarray = field(repr=False)
    source: str = "model"
    variance_bound_C: float | None = None
    bound_proxy: float | None = None
    estimand: Estimand = ATE


def pointwise_terms(p, mu0, model: OutcomeModel, tau=None):
    """``Var(Y1|X)/p + Var(Y0|X)/(1-p) - (tau(X) - tau)^2`` for Bernoulli outcomes."""
    mu0 = np.asarray(mu0, dtype=float)
    mu1 = model.mu1(mu0)
    cate = model.cate(mu0)
    if tau is None:
        tau = float(np.mean(cate))
    return mu1 * (1 - mu1) / p + mu0 * (1 - mu0) / (1 - p) - (cate - tau) ** 2


def efficiency_variance(
    policy, cohort: Cohort, model: OutcomeModel | None = None, *, bound_c=None, estimand=None, split=EVAL
) -> VarianceReport:
    """Per-unit efficiency bound of ``policy`` for the ATE or a GATE.

    For a GATE the average runs over the target set only (equivalently the
    full-sample average of ``1[S] * term / Pr[S]``).
    """
    if model is None and bound_c is None:
        raise ValueError("need an outcome model or a variance bound C")
    est = _estimand_of(policy, estimand)
    rows = view(cohort, split)
    p = probabilities_for(policy, rows)
    mask = est.mask(rows.u, rows.group)
    if not mask.any():
        raise ValueError("the estimand's target set is empty on the evaluated rows")
    sur = float(np.mean(surrogate(p[mask])))
    proxy = None if bound_c is None else float(bound_c) * sur
    if model is None:
        return VarianceReport(proxy, sur, np.full(int(mask.sum()), np.nan), "bound", float(bound_c), proxy, est)
    tau_s = float(np.mean(model.cate(rows.mu0[mask])))
    terms = pointwise_terms(p[mask], rows.mu0[mask], model, tau_s)
    return VarianceReport(float(np.mean(terms)), sur, terms, "model", None if bound_c is None else float(bound_c), proxy, est)


@dataclass(frozen=True)
class TrialResult:
    estimates: np.ndarray = field(repr=False)
    mean: float
    empirical_var: float
    truth: float

    @property
    def se(self) -> float:
        return float(np.sqrt(self.empirical_var / self.estimates.size))


def simulate_trial(
    policy, cohort: Cohort, model: OutcomeModel, estimator="aipw", replicates=1000, seed=None, split=EVAL, chunk=64
) -> TrialResult:
    """Monte Carlo trials on a fixed cohort with known propensities.

    Each replicate draws coupled potential outcomes and independent
    Bernoulli(p) assignments, then applies IPW or AIPW (the latter with the
    true outcome means). Effects are estimated as reductions ``Y0 - Y1``,
    the same orientation as :meth:`OutcomeModel.cate`. The random stream depends only on ``seed``, so two
    calls that differ only in ``estimator`` see identical draws.
    """
    if replicates < 2:
        raise ValueError("need at least two replicates")
    if estimator not in ("ipw", "aipw"):
        raise ValueError(f"unknown estimator {estimator!r}")
    rows = view(cohort, split)
    p = probabilities_for(policy, rows)
    mu0 = rows.mu0
    mu1 = model.mu1(mu0)
    rng = np.random.default_rng(seed)
    n = len(rows)
    out = np.empty(replicates)
    for start in range(0, replicates, chunk):
        m = min(chunk, replicates - start)
        v = rng.random((m, n))
        t = rng.random((m, n)) < p
        y = np.where(t, v < mu1, v < mu0).astype(float)
        if estimator == "ipw":
            scores = np.where(t, -y / p, y / (1 - p))
        else:
            scores = (mu0 - mu1) + np.where(t, -(y - mu1) / p, (y - mu0) / (1 - p))
        out[start : start + m] = scores.mean(axis=1)
    return TrialResult(out, float(out.mean()), float(out.var(ddof=1)), model.ate(rows))


def pointwise_variance_curve(policy, cohort: Cohort, model: OutcomeModel, bins=10, split=EVAL):
    """Bin-averaged pointwise bound over ``u``, relative to its population mean.

    Returns rows ``{"u_lo", "u_hi", "u_mid", "count", "relative_variance"}``
    for equal-width bins on the observed ``u`` range; empty bins are dropped.
    The count-weighted mean of ``relative_variance`` is 1.
    """
    if bins < 2:
        raise ValueError("need at least two bins")
    rows = view(cohort, split)
    p = probabilities_for(policy, rows)
    terms = pointwise_terms(p, rows.mu0, model)
    overall = float(np.mean(terms))
    edges = np.linspace(rows.u.min(), rows.u.max(), bins + 1)
    idx = np.clip(np.searchsorted(edges, rows.u, side="right") - 1, 0, bins - 1)
    table = []
    for k in range(bins):
        m = idx == k
        if not m.any():
            continue
        table.append(
            {
                "u_lo": float(edges[k]),
                "u_hi": float(edges[k + 1]),
                "u_mid": float(0.5 * (edges[k] + edges[k + 1])),
                "count": int(m.sum()),
                "relative_variance": float(np.mean(terms[m]) / overall),
            }
        )
    return table
