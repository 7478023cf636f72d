import csv
import json
import re

import numpy as np
import pytest

from allocdesign.cohort import OutcomeModel, synthesize_cohort
from allocdesign.constraints import max_achievable_utility
from allocdesign.frontier import (
    ANCHOR_FIELDS,
    FRONTIER_FIELDS,
    DesignTemplate,
    Frontier,
    NeedBasedAnchor,
    bootstrap_bands,
    default_grid,
    frontier_rows,
    frontier_svg,
    multiplier_bootstrap,
    ninety_percent_point,
    sweep,
    write_table,
)
from allocdesign.power import PowerSpec

MODEL = OutcomeModel(0.1)


@pytest.fixture(scope="module")
def cohort():
    return synthesize_cohort(6000, 0.54, seed=13)


@pytest.fixture(scope="module")
def frontier(cohort):
    return sweep(cohort, MODEL, DesignTemplate(0.3), default_grid(cohort.train(), 0.3, 0.01, 12), seed=1)


def test_default_grid_endpoints(cohort):
    train = cohort.train()
    grid = default_grid(train, 0.3, 0.01)
    assert grid.size == 25
    assert grid[0] == pytest.approx(0.3 * train.u.mean())
    assert grid[-1] == pytest.approx(0.999 * max_achievable_utility(train.u, 0.3, 0.01))


def test_min_level_is_uniform_randomisation(cohort):
    lo = 0.3 * cohort.train().u.mean()
    f = sweep(cohort, MODEL, DesignTemplate(0.3), [lo], benchmarks=True, seed=1)
    (pt,) = f.points
    np.testing.assert_allclose(pt.policy.on_cohort(cohort), 0.3, atol=1e-6)
    assert pt.recall == pytest.approx(0.3, abs=1e-6)
    assert pt.recall == pytest.approx(f.rct.recall, abs=1e-4)
    assert pt.v_ate == pytest.approx(f.rct.v_ate, abs=1e-4)


def test_surrogate_monotone_along_frontier(frontier):
    s = [p.surrogate for p in frontier.feasible_points]
    assert np.all(np.diff(s) >= -1e-6)
    r = [p.recall for p in frontier.feasible_points]
    assert np.all(np.diff(r) >= -1e-6)


def test_top_of_frontier_approaches_need_based(frontier):
    gap = frontier.need_based.recall - frontier.points[-1].recall
    # Designed on the train rows, so the eval-split budget use can overshoot b slightly.
    assert abs(gap) <= 0.05


def test_infeasible_levels_are_marked(cohort):
    f = sweep(cohort, MODEL, DesignTemplate(0.3), [0.1, 0.95], benchmarks=False)
    assert f.points[0].feasible and not f.points[1].feasible
    assert len(f.feasible_points) == 1


def test_warm_start_invariance(cohort):
    grid = default_grid(cohort.train(), 0.3, 0.01, 6)
    warm = sweep(cohort, MODEL, DesignTemplate(0.3), grid, benchmarks=False, warm_start=True)
    cold = sweep(cohort, MODEL, DesignTemplate(0.3), grid, benchmarks=False, warm_start=False)
    for a, b in zip(warm.points, cold.points):
        assert a.recall == pytest.approx(b.recall, abs=1e-5)
        assert a.v_ate == pytest.approx(b.v_ate, rel=1e-4)


def test_unsorted_grid_rejected(cohort):
    with pytest.raises(ValueError):
        sweep(cohort, MODEL, DesignTemplate(0.3), [0.2, 0.1], benchmarks=False)


def test_ninety_point_interpolates(frontier):
    pt = frontier.ninety_pct
    target = 0.9 * frontier.need_based.recall
    recalls = [p.recall for p in frontier.feasible_points]
    gap = max(np.diff(recalls))
    assert target <= pt.recall <= target + gap
    assert frontier.points[0].c <= pt.c <= frontier.points[-1].c


def test_ninety_point_unattained(cohort, frontier):
    lone = Frontier([frontier.points[0]], need_based=NeedBasedAnchor(0.5, 0.3), spec=frontier.spec)
    assert ninety_percent_point(lone) is None


def test_multiplier_band_degenerate():
    draws = multiplier_bootstrap(np.full(500, 0.7), 200, seed=1)
    assert np.ptp(draws) == 0.0


@pytest.mark.parametrize("law", ["gaussian", "rademacher"])
def test_multiplier_band_width_matches_clt(law):
    widths, theory = [], []
    for seed in range(10):
        f = np.random.default_rng(seed).exponential(size=2000)
        draws = multiplier_bootstrap(f, 2000, law, seed=seed + 100)
        lo, hi = np.percentile(draws, [2.5, 97.5])
        widths.append(hi - lo)
        theory.append(2 * 1.96 * f.std() / np.sqrt(f.size))
    assert np.mean(widths) == pytest.approx(np.mean(theory), rel=0.1)


def test_multiplier_law_validation():
    with pytest.raises(ValueError):
        multiplier_bootstrap(np.ones(3), 10, "poisson")


def test_bands_bracket_point_estimates(frontier):
    bands = bootstrap_bands(frontier, 500, seed=3)
    eps = 1e-12
    for pt, band in zip(frontier.points, bands):
        lo, hi = band["recall"]
        assert lo - eps <= pt.recall <= hi + eps
        lo, hi = band["v_ate"]
        assert lo - eps <= pt.v_ate <= hi + eps
        lo, hi = band["n_required"]
        assert lo <= pt.n_required <= hi


def test_tables_and_svg(frontier, tmp_path):
    bootstrap_bands(frontier, 200, seed=3)
    write_table(frontier_rows(frontier), tmp_path / "f.csv", FRONTIER_FIELDS)
    with open(tmp_path / "f.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(frontier.points)
    assert float(rows[0]["recall"]) == frontier.points[0].recall
    assert set(FRONTIER_FIELDS) <= set(rows[0])
    svg = frontier_svg(frontier)
    assert svg.lstrip().startswith("<?xml") and "<svg" in svg
    payload = re.search(r"<!-- frontier-data (.*?) -->", svg, re.S).group(1)
    data = json.loads(payload)
    assert len(data["points"]) == len(frontier.points)
    assert {a["design"] for a in data["anchors"]} >= {"rct", "need_based", "rd"}


def test_no_band_columns_without_bootstrap(cohort, tmp_path):
    f = sweep(cohort, MODEL, DesignTemplate(0.3), default_grid(cohort.train(), 0.3, 0.01, 3), benchmarks=False)
    write_table(frontier_rows(f), tmp_path / "f.csv", FRONTIER_FIELDS)
    header = (tmp_path / "f.csv").read_text().splitlines()[0].split(",")
    assert header == ["c", "recall", "v_ate", "n_required"]


def test_gate_template_from_config(cohort):
    t = DesignTemplate(0.3, estimand={"type": "gate", "top_fraction": 0.3})
    est = t.resolve_estimand(cohort.train())
    assert est.kind == "gate"
    assert est.mask(cohort.train().u).mean() == pytest.approx(0.3, abs=0.01)


def test_spec_detects_model_ate(cohort, frontier):
    assert frontier.spec == PowerSpec.for_model(MODEL, cohort.evaluation())
    assert ANCHOR_FIELDS[0] == "design"
