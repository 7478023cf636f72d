import math

import numpy as np
import pytest
from scipy import stats

from allocdesign.cohort import OutcomeModel, synthesize_cohort
from allocdesign.errors import ConfigError, DataError
from allocdesign.evaluator import efficiency_variance
from allocdesign.power import (
    PowerSpec,
    ik_bandwidth,
    rct_benchmark,
    rd_benchmark,
    rd_design_effect,
    wald_sample_size,
    wald_sample_size_exact,
)
from conftest import make_cohort


def test_wald_reference_value():
    spec = PowerSpec(0.1)
    assert wald_sample_size(1.0, spec) == 785
    z = stats.norm.ppf(0.975) + stats.norm.ppf(0.8)
    assert wald_sample_size_exact(1.0, spec) == pytest.approx(z**2 * 100, rel=1e-14)


def test_wald_scaling_is_exact():
    base = wald_sample_size_exact(0.7, PowerSpec(0.05))
    assert wald_sample_size_exact(0.7, PowerSpec(0.1)) == pytest.approx(base / 4, rel=1e-14)
    assert wald_sample_size_exact(1.4, PowerSpec(0.05)) == pytest.approx(2 * base, rel=1e-14)


def test_wald_monotone():
    vs = np.linspace(0.1, 5, 50)
    ns = [wald_sample_size(v, PowerSpec(0.1)) for v in vs]
    assert ns == sorted(ns)
    taus = np.linspace(0.01, 0.5, 50)
    ns = [wald_sample_size(1.0, PowerSpec(t)) for t in taus]
    assert ns == sorted(ns, reverse=True)


def test_power_spec_validation():
    for bad in ({"tau_detect": 0.0}, {"tau_detect": 0.1, "alpha": 1.2}, {"tau_detect": 0.1, "power": 0.01}):
        with pytest.raises(ConfigError):
            PowerSpec(**bad)
    with pytest.raises(ValueError):
        wald_sample_size(0.0, PowerSpec(0.1))


def test_rct_benchmark_closed_form():
    c = make_cohort(np.full(100, 0.5))
    model = OutcomeModel(0.1)
    spec = PowerSpec(0.05)
    rct = rct_benchmark(c, model, 0.5, spec, split=None)
    v = 0.45 * 0.55 / 0.5 + 0.25 / 0.5
    assert rct.v_ate == pytest.approx(v)
    assert rct.n_required == math.ceil(spec.z_factor * v / 0.05**2)
    assert rct.recall == pytest.approx(0.5)
    assert rct_benchmark(c, model, 0.5, spec, split=None).n_required <= rct_benchmark(c, model, 0.3, spec, split=None).n_required


def test_rct_recall_equals_budget():
    c = synthesize_cohort(3000, 0.39, seed=1)
    rct = rct_benchmark(c, OutcomeModel(0.1), 0.3, PowerSpec(0.04))
    assert rct.recall == pytest.approx(0.3)


def test_ik_constant_outcomes_finite():
    x = np.random.default_rng(0).random(2000)
    h = ik_bandwidth(x, np.ones_like(x), 0.5)
    assert np.isfinite(h) and h > 0


def test_ik_linear_means_pick_wide_bandwidth():
    for seed in range(3):
        rng = np.random.default_rng(seed)
        x = rng.random(10_000)
        y = (rng.random(10_000) < 0.2 + 0.5 * x).astype(float)
        assert ik_bandwidth(x, y, 0.5) >= np.std(x, ddof=1)


def test_ik_rate():
    ratios = []
    for seed in range(20):
        hs = []
        for n in (4000, 8000):
            rng = np.random.default_rng(seed * 10 + n)
            x = rng.random(n)
            mean = 0.2 + 0.2 * x + 2.0 * np.where(x >= 0.5, (x - 0.5) ** 2, 0.0) + 0.1 * (x >= 0.5)
            hs.append(ik_bandwidth(x, mean + 0.3 * rng.standard_normal(n), 0.5))
        ratios.append(hs[1] / hs[0])
    assert np.mean(ratios) == pytest.approx(2**-0.2, rel=0.1)


def test_ik_validation():
    x = np.linspace(0, 1, 100)
    with pytest.raises(DataError):
        ik_bandwidth(x, x, 0.95)
    with pytest.raises(ConfigError):
        ik_bandwidth(x, x, 0.5, kernel="gaussian")


def test_uniform_design_effect():
    x = np.random.default_rng(1).uniform(-1, 1, 200_000)
    deff, rho, band = rd_design_effect(x, 0.0, 1.0)
    assert rho == pytest.approx(np.sqrt(3) / 2, abs=5e-3)
    assert deff == pytest.approx(4.0, abs=0.1)
    assert band.all()


def test_design_effect_at_least_one(rng):
    for _ in range(20):
        x = rng.beta(rng.uniform(0.5, 3), rng.uniform(0.5, 3), 2000)
        deff, _, _ = rd_design_effect(x, float(np.median(x)), rng.uniform(0.05, 0.5))
        assert deff >= 1.0


def test_rd_full_band_is_four_balanced_trials():
    u = (np.arange(20_000) + 0.5) / 20_000
    c = make_cohort(u)
    rd = rd_benchmark(c, OutcomeModel(0.1), 0.5, PowerSpec(0.05), split=None, bandwidth=0.5)
    assert rd.fraction_in_bandwidth == 1.0
    assert rd.deff == pytest.approx(4.0, abs=1e-3)
    v_half = efficiency_variance(0.5, c, OutcomeModel(0.1), split=None).v_ate
    assert rd.n_balanced == wald_sample_size(v_half, PowerSpec(0.05))
    assert rd.n_required == math.ceil(rd.deff * rd.n_balanced)


@pytest.mark.parametrize("base_rate, b", [(0.54, 0.3), (0.39, 0.15), (0.39, 0.45)])
def test_rd_needs_more_than_rct(base_rate, b):
    c = synthesize_cohort(20_000, base_rate, seed=3)
    model = OutcomeModel(0.1)
    spec = PowerSpec.for_model(model, c.evaluation())
    rd = rd_benchmark(c, model, b, spec, seed=4)
    assert rd.deff >= 1.0
    assert rd.n_required >= rct_benchmark(c, model, b, spec).n_required
