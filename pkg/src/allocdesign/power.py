"""Sample sizes for Wald tests and the RCT / regression-discontinuity benchmarks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .cohort import EVAL, Cohort, OutcomeModel, draw_potential_outcomes
from .errors import ConfigError, DataError
from .evaluator import efficiency_variance, utility_report, view

# Edge-kernel constants of the Imbens-Kalyanaraman bandwidth.
IK_KERNEL_CONSTANTS = {"triangular": 3.4375, "uniform": 5.40, "epanechnikov": 3.1999}


@dataclass(frozen=True)
class PowerSpec:
    """Two-sided Wald test parameters: type-1 error, power, effect to detect."""

    tau_detect: float
    alpha: float = 0.05
    power: float = 0.8

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if not self.alpha < self.power < 1:
            raise ConfigError("power must lie in (alpha, 1)")
        if not self.tau_detect > 0:
            raise ConfigError("tau_detect must be positive")

    @classmethod
    def for_model(cls, model: OutcomeModel, cohort: Cohort, alpha=0.05, power=0.8):
        """Detect the model's own ATE on ``cohort``."""
        return cls(model.ate(cohort), alpha, power)

    @property
    def z_factor(self) -> float:
        """``(z_{1-alpha/2} + z_{power})^2``."""
        return float((stats.norm.ppf(1 - self.alpha / 2) + stats.norm.ppf(self.power)) ** 2)


def wald_sample_size_exact(v: float, spec: PowerSpec) -> float:
    """``(z_{1-alpha/2} + z_power)^2 v / tau^2`` before rounding up."""
    if not v > 0:
        raise ValueError("per-unit variance must be positive")
    return spec.z_factor * v / spec.tau_detect**2


def wald_sample_size(v: float, spec: PowerSpec) -> int:
    return int(math.ceil(wald_sample_size_exact(v, spec)))


@dataclass(frozen=True)
class RCTBenchmark:
    n_required: int
    recall: float
    v_ate: float
    budget: float


def rct_benchmark(cohort: Cohort, model: OutcomeModel, b: float, spec: PowerSpec, split=EVAL) -> RCTBenchmark:
    """Uniform randomisation of the same budget: ``p = b`` for everyone."""
    if not 0 < b < 1:
        raise ConfigError("budget must lie in (0, 1)")
    v = efficiency_variance(b, cohort, model, split=split).v_ate
    recall = utility_report(b, cohort, split=split).recall
    return RCTBenchmark(wald_sample_size(v, spec), recall, v, b)


def _lstsq(design, y):
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return coef


def ik_bandwidth(running, outcomes, cutoff, kernel="triangular", min_side=50) -> float:
    """Imbens-Kalyanaraman MSE-optimal bandwidth for a sharp discontinuity.

    1. Silverman-type pilot ``h1 = 1.84 sd(x) n^(-1/5)`` gives the density at
       the cutoff and the outcome variances just left and right of it.
    2. A global cubic with a jump at the cutoff gives a third derivative,
       which sets the pilot bandwidths of one-sided local quadratic fits for
       the second derivatives; each side gets the regulariser
       ``720 sigma^2 / (n_2 h_2^4)``.
    3. ``h = C_K ((s2_l + s2_r) / (f ((m2_r - m2_l)^2 + r_l + r_r)))^(1/5) n^(-1/5)``.

    Pilot bandwidths that come out infinite (zero third derivative) are
    capped at the data range on that side. Variances are floored at 1e-12
    so constant outcomes give a finite, regularisation-driven bandwidth.
    """
    x = np.asarray(running, dtype=float)
    y = np.asarray(outcomes, dtype=float)
    if x.shape != y.shape:
        raise ValueError("running variable and outcomes must align")
    try:
        c_k = IK_KERNEL_CONSTANTS[kernel]
    except KeyError:
        raise ConfigError(f"unknown kernel {kernel!r}") from None
    left, right = x < cutoff, x >= cutoff
    n_l, n_r = int(left.sum()), int(right.sum())
    if n_l < min_side or n_r < min_side:
        raise DataError(f"need at least {min_side} observations on each side of the cutoff (got {n_l}, {n_r})")
    n = x.size
    d = x - cutoff

    h1 = 1.84 * np.std(x, ddof=1) * n ** (-0.2)
    win_l = left & (d >= -h1)
    win_r = right & (d <= h1)
    if win_l.sum() < 2 or win_r.sum() < 2:
        raise DataError("pilot bandwidth leaves fewer than two observations on one side")
    density = (win_l.sum() + win_r.sum()) / (2 * n * h1)
    floor = 1e-12
    s2_l = max(float(np.var(y[win_l], ddof=1)), floor)
    s2_r = max(float(np.var(y[win_r], ddof=1)), floor)

    cubic = _lstsq(np.column_stack([np.ones(n), right, d, d**2, d**3]), y)
    m3 = 6.0 * cubic[4]

    def second_derivative(side, s2, n_side, reach):
        h2 = 3.56 * (s2 / (density * m3**2)) ** (1 / 7) * n_side ** (-1 / 7) if m3 != 0 else np.inf
        h2 = float(min(h2, reach))
        win = side & (np.abs(d) <= h2)
        if win.sum() < 4:
            order = np.argsort(np.abs(d[side]))
            h2 = float(np.abs(d[side])[order[min(3, order.size - 1)]])
            win = side & (np.abs(d) <= h2)
        dd = d[win]
        quad = _lstsq(np.column_stack([np.ones(dd.size), dd, dd**2]), y[win])
        reg = 720.0 * s2 / (win.sum() * h2**4)
        return 2.0 * quad[2], reg

    m2_l, r_l = second_derivative(left, s2_l, n_l, float(-d[left].min()))
    m2_r, r_r = second_derivative(right, s2_r, n_r, float(d[right].max()) if d[right].max() > 0 else 1e-12)
    ratio = (s2_l + s2_r) / (density * ((m2_r - m2_l) ** 2 + r_l + r_r))
    return float(c_k * ratio**0.2 * n ** (-0.2))


@dataclass(frozen=True)
class RDBenchmark:
    cutoff: float
    bandwidth: float
    deff: float
    fraction_in_bandwidth: float
    n_balanced: int
    n_required: int
    rho: float


def rd_design_effect(running, cutoff, bandwidth):
    """``1 / (1 - rho^2)`` with ``rho = corr(1[x >= cutoff], x)`` inside the bandwidth."""
    x = np.asarray(running, dtype=float)
    band = np.abs(x - cutoff) <= bandwidth
    t = (x[band] >= cutoff).astype(float)
    if band.sum() < 3 or t.min() == t.max():
        raise DataError("the bandwidth does not straddle the cutoff")
    rho = float(np.corrcoef(t, x[band])[0, 1])
    if rho**2 >= 1 - 1e-9:
        raise DataError("running variable is degenerate inside the bandwidth")
    return 1.0 / (1.0 - rho**2), rho, band


def rd_benchmark(
    cohort: Cohort, model: OutcomeModel, b: float, spec: PowerSpec, seed=None, split=EVAL, kernel="triangular", bandwidth=None
) -> RDBenchmark:
    """Sample size for an RD analysis of need-based targeting at budget ``b``.

    The cutoff is the ``(1-b)``-quantile of ``u``. Outcomes are simulated
    under need-based assignment to pick the IK bandwidth (unless one is
    given); the required sample is the design effect times a balanced
    trial's sample size on the in-bandwidth population, divided by the
    share of the cohort inside the bandwidth.
    """
    rows = view(cohort, split)
    u = rows.u
    cutoff = float(np.quantile(u, 1 - b))
    if np.unique(u).size < 2:
        raise DataError("u needs at least two distinct values")
    if bandwidth is None:
        po = draw_potential_outcomes(rows, model, seed)
        treated = u >= cutoff
        y = np.where(treated, po.y1, po.y0)
        bandwidth = ik_bandwidth(u, y, cutoff, kernel)
    deff, rho, band = rd_design_effect(u, cutoff, bandwidth)
    f_h = float(band.mean())
    v_half = efficiency_variance(0.5, rows.subset(band), model, split=None).v_ate
    n_bal = wald_sample_size(v_half, spec)
    return RDBenchmark(cutoff, float(bandwidth), deff, f_h, n_bal, int(math.ceil(deff * n_bal / f_h)), rho)
