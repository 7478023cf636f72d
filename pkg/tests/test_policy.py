import json

import numpy as np
import pytest

from allocdesign.cohort import Individual, synthesize_cohort
from allocdesign.constraints import DesignProblem, Estimand, make_budget_cap, make_fairness_pair, make_utility_floor
from allocdesign.dual import solve_dual
from allocdesign.errors import ConfigError, PolicyFileError, PolicyVersionError
from allocdesign.policy import (
    CONTROL,
    TREATED,
    Policy,
    assign_probability,
    draw_assignment,
    draw_assignments,
    export_policy,
    import_policy,
)
from conftest import make_cohort


def solved(cohort, constraints, gamma=0.01, estimand=Estimand()):
    problem = DesignProblem(cohort, constraints, gamma, estimand)
    return Policy.from_solution(problem, solve_dual(problem))


@pytest.fixture(scope="module")
def s_curve_policy():
    c = synthesize_cohort(3000, 0.54, seed=5)
    return solved(c, [make_utility_floor(0.25), make_budget_cap(0.3)])


def test_zero_prices_give_half():
    pol = Policy(np.zeros(2), (make_utility_floor(0.2), make_budget_cap(0.3)), 0.01)
    np.testing.assert_array_equal(pol.probabilities(np.linspace(0, 1, 11)), 0.5)


def test_two_point_policy_on_high_utility(two_point):
    pol = solved(two_point, [make_utility_floor(0.45), make_budget_cap(0.5)], 0.05)
    assert assign_probability(pol, Individual("new", 1.0, 1.0)) == pytest.approx(0.9, abs=1e-3)
    assert assign_probability(pol, Individual("new", 0.0, 0.0)) == pytest.approx(0.1, abs=1e-3)


def test_gate_outsider_goes_to_floor():
    # A budget price of 0.2 makes the aggregated coefficient +0.2 for everyone.
    pol = Policy(np.array([0.2]), (make_budget_cap(0.3),), 0.05, Estimand("gate", u_min=0.5), 0.5)
    assert assign_probability(pol, Individual("out", 0.3, 0.3)) == 0.05
    assert assign_probability(pol, Individual("in", 0.8, 0.8)) > 0.05


def test_range_on_random_probes(s_curve_policy, rng):
    p = s_curve_policy.probabilities(rng.random(10_000))
    assert p.min() >= 0.01 and p.max() <= 0.99


def test_s_shape_monotone_in_utility(s_curve_policy):
    p = s_curve_policy.probabilities(np.linspace(0, 1, 2001))
    assert np.all(np.diff(p) >= 0)
    assert p[0] < 0.2 and p[-1] > 0.8


def test_stateless_under_permutation(s_curve_policy, rng):
    people = [Individual(f"x{k}", u, u) for k, u in enumerate(rng.random(200))]
    first = {i.id: assign_probability(s_curve_policy, i) for i in people}
    shuffled = [people[k] for k in rng.permutation(len(people))]
    assert {i.id: assign_probability(s_curve_policy, i) for i in shuffled} == first
    batch = s_curve_policy.probabilities(np.array([i.u for i in people]))
    np.testing.assert_array_equal(batch, [first[i.id] for i in people])


def test_recorded_propensity_is_exact(s_curve_policy):
    ind = Individual("abc", 0.42, 0.42)
    a = draw_assignment(s_curve_policy, ind, seed=3)
    assert a.p == assign_probability(s_curve_policy, ind)
    assert a.arm in (TREATED, CONTROL)
    assert draw_assignment(s_curve_policy, ind, seed=3) == a


def test_treated_fraction_at_floor():
    ids = [f"u{k}" for k in range(100_000)]
    assert abs(draw_assignments(ids, np.full(len(ids), 0.01), seed=1).mean() - 0.01) <= 0.002


def test_treated_fraction_at_ceiling():
    pol = Policy(np.array([1e6]), (make_utility_floor(0.5),), 0.05)
    p = pol.probabilities(np.ones(1))[0]
    assert p == 0.95
    ids = [f"u{k}" for k in range(100_000)]
    frac = draw_assignments(ids, np.full(len(ids), p), seed=2).mean()
    assert abs(frac - 0.95) <= 4 * np.sqrt(0.95 * 0.05 / len(ids))


def test_round_trip_is_exact(s_curve_policy, tmp_path):
    export_policy(s_curve_policy, tmp_path / "p.json")
    back = import_policy(tmp_path / "p.json")
    probes = np.linspace(0, 1, 1001)
    assert np.max(np.abs(back.probabilities(probes) - s_curve_policy.probabilities(probes))) == 0.0
    assert back.provenance["problem_hash"] == s_curve_policy.provenance["problem_hash"]


def test_round_trip_fair_gate_policy(tmp_path, rng):
    c = synthesize_cohort(400, 0.4, seed=8, groups={"A": 0.5, "B": 0.5})
    cons = [make_utility_floor(0.2), make_budget_cap(0.35), *make_fairness_pair("utility", ("A", "B"), 0.02, c)]
    pol = solved(c, cons, estimand=Estimand.top_fraction(c, 0.3))
    export_policy(pol, tmp_path / "p.json")
    back = import_policy(tmp_path / "p.json")
    np.testing.assert_array_equal(back.on_cohort(c), pol.on_cohort(c))
    with pytest.raises(ConfigError):
        pol.probabilities(np.array([0.3]))


def test_truncated_file(s_curve_policy, tmp_path):
    export_policy(s_curve_policy, tmp_path / "p.json")
    text = (tmp_path / "p.json").read_text()
    (tmp_path / "t.json").write_text(text[: len(text) // 2])
    with pytest.raises(PolicyFileError):
        import_policy(tmp_path / "t.json")


def test_unknown_version(s_curve_policy, tmp_path):
    doc = s_curve_policy.to_dict()
    doc["version"] = 99
    (tmp_path / "v.json").write_text(json.dumps(doc))
    with pytest.raises(PolicyVersionError):
        import_policy(tmp_path / "v.json")
    doc["format"] = "other"
    (tmp_path / "f.json").write_text(json.dumps(doc))
    with pytest.raises(PolicyFileError):
        import_policy(tmp_path / "f.json")


def test_policy_validation():
    with pytest.raises(ConfigError):
        Policy(np.array([1.0, 2.0]), (make_budget_cap(0.3),), 0.01)
    with pytest.raises(ConfigError):
        Policy(np.array([-1.0]), (make_budget_cap(0.3),), 0.01)
