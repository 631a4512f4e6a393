"""
Scenario indicators, screening and big-M constants of joint chance constraints
"""
import itertools
import math

import numpy as np
import pytest

from models.case import ForecastErrorSpec, ForecastSource, SourceKind
from models.errors import ModelBuildError
from services.saa import (
    ScenarioRow,
    UncertainRow,
    attach_families,
    attach_jcc,
    attach_robust,
    audit_report,
    compute_big_m,
    families_from_rows,
    uncertain_generator,
    violation_rate,
    wilson_interval,
)
from services.uncertainty import sample
from solvers.backend import solve
from solvers.program import MathProgram, Sense

XI = [-0.1, 0.05, 0.2]


def toy(xi, delta):
    """min x s.t. x >= xi_i jointly with probability 1 - delta, x in [0, 1]"""
    program = MathProgram("toy")
    program.add_var("x", 0.0, 1.0, cost=1.0)
    rows = [[ScenarioRow({"x": 1.0}, Sense.GE, v, "need")] for v in xi]
    block = attach_jcc(program, rows, delta, "toy")
    return program, block


def enumerate_toy(xi, budget):
    best = math.inf
    for dropped in itertools.combinations(range(len(xi)), budget):
        kept = [v for i, v in enumerate(xi) if i not in dropped]
        best = min(best, max([0.0] + kept))
    return best


def test_big_m_of_a_single_bound_row():
    row = ScenarioRow({"x": 1.0}, Sense.GE, 0.2)
    assert compute_big_m(row, {"x": (0.0, 1.0)}) == pytest.approx(0.2)


def test_identity_row_needs_no_big_m():
    row = ScenarioRow({"x": 1.0}, Sense.LE, 1.0)
    assert compute_big_m(row, {"x": (0.0, 1.0)}) == 0.0


def test_zero_coefficient_row():
    row = ScenarioRow({"x": 0.0}, Sense.LE, -0.3)
    assert compute_big_m(row, {"x": (-math.inf, math.inf)}) == pytest.approx(0.3)


def test_big_m_against_box_corners():
    rng = np.random.default_rng(0)
    for _ in range(10):
        coeffs = {f"v{j}": rng.uniform(-2, 2) for j in range(3)}
        bounds = {f"v{j}": tuple(sorted(rng.uniform(-1, 1, size=2))) for j in range(3)}
        rhs = rng.uniform(-1, 1)
        corners = [
            sum(coeffs[f"v{j}"] * bounds[f"v{j}"][pick[j]] for j in range(3))
            for pick in itertools.product([0, 1], repeat=3)
        ]
        expected = max(0.0, max(corners) - rhs)
        assert compute_big_m(ScenarioRow(coeffs, Sense.LE, rhs), bounds) == pytest.approx(expected)


def test_unbounded_variable_has_no_big_m():
    with pytest.raises(ModelBuildError):
        compute_big_m(ScenarioRow({"x": 1.0}, Sense.LE, 0.0), {"x": (0.0, math.inf)})


def test_equality_rows_cannot_be_chance_constrained():
    with pytest.raises(ModelBuildError):
        families_from_rows([[ScenarioRow({"x": 1.0}, Sense.EQ, 0.0, "eq")]])


@pytest.mark.parametrize("delta, budget", [(0.0, 0), (0.34, 1), (0.49, 1)])
def test_toy_matches_enumeration(delta, budget):
    program, block = toy(XI, delta)
    assert block.budget == budget
    solution = solve(program, "builtin")
    assert solution.optimal
    assert solution.objective == pytest.approx(enumerate_toy(XI, budget))


def test_screened_threshold_row():
    """With one drop allowed only the tightest scenario gets an indicator"""
    program, block = toy(XI, 0.34)
    assert list(block.indicators) == [2]
    assert block.big_m[("need", 2)] == pytest.approx(0.15)
    assert any(r.name == "toy.need" and r.rhs == pytest.approx(-0.05) for r in program.rows)


def test_budget_row_limits_the_drops():
    program, block = toy([0.3, 0.4, 0.5, 0.6, 0.7, 0.8], 0.34)
    assert block.budget == 2
    budget_row = next(r for r in program.rows if r.name == "toy.budget")
    assert budget_row.rhs == 2
    solution = solve(program, "builtin")
    assert solution.objective == pytest.approx(0.6)


def test_level_out_of_range():
    with pytest.raises(ModelBuildError):
        toy(XI, 0.5)


def test_violation_rate_on_training_rows():
    program, block = toy(XI, 0.34)
    assert violation_rate({"x": 0.05}, block) == pytest.approx(1 / 3)
    assert violation_rate({"x": 0.2}, block) == 0.0


SPEC = ForecastErrorSpec(sources=[
    ForecastSource(id="d", kind=SourceKind.DEMAND, region="tps", target="1", lo=-0.1, hi=0.1),
])


def uncertain_program(delta, n=40):
    """x covers a demand error: x >= zeta, i.e. -x + zeta <= 0"""
    scenarios = sample(SPEC, n, seed=2)
    program = MathProgram("reserve")
    program.add_var("x", 0.0, 1.0, cost=1.0)
    row = UncertainRow("cover", {"x": -1.0}, 0.0, {"d@0": 1.0})
    families = [row.family(scenarios)]
    block = attach_families(program, families, scenarios.n, delta, "cover", uncertain_generator([row]))
    return program, block, scenarios, row


def test_uncertain_row_takes_the_empirical_quantile():
    program, block, scenarios, _ = uncertain_program(0.05)
    solution = solve(program, "highs")
    column = np.sort(scenarios.column("d", 0))
    # two of forty scenarios may be dropped
    assert solution.objective == pytest.approx(column[-3])


def test_robust_rows_use_the_support():
    program = MathProgram("robust")
    program.add_var("x", 0.0, 1.0, cost=1.0)
    row = UncertainRow("cover", {"x": -1.0}, 0.0, {"d@0": 1.0})
    block = attach_robust(program, [row], {"d@0": (-0.1, 0.1)}, 40, "cover")
    assert block.robust and block.budget == 0
    assert solve(program, "builtin").objective == pytest.approx(0.1)


def solved_values(program, block, solution):
    values = {"x": program.value(solution, "x")}
    for name in block.indicators.values():
        values[name] = float(solution.values[program.index(name)])
    return values


def test_audit_on_fresh_scenarios():
    program, block, scenarios, _ = uncertain_program(0.05)
    solution = solve(program, "highs")
    values = solved_values(program, block, solution)
    fresh = sample(SPEC, 400, seed=99)
    report = audit_report([block], values, scenarios, fresh)
    entry = report.block("cover")
    assert entry.training_rate <= 0.05 + 1e-12
    assert entry.fresh_scenarios == 400
    assert entry.interval_low <= entry.fresh_rate <= entry.interval_high
    assert entry.indicators_used <= block.budget


def test_calibration_on_ten_thousand_fresh_scenarios():
    program, block, scenarios, _ = uncertain_program(0.05, n=1000)
    solution = solve(program, "highs")
    column = np.sort(scenarios.column("d", 0))
    assert solution.objective == pytest.approx(column[-51])
    report = audit_report([block], solved_values(program, block, solution), scenarios, sample(SPEC, 10_000, seed=99))
    entry = report.block("cover")
    assert entry.training_rate <= 0.05 + 1e-12
    assert entry.fresh_rate <= 0.07


def test_blocks_without_a_generator_cannot_replay():
    _, block = toy(XI, 0.34)
    with pytest.raises(ValueError):
        violation_rate({"x": 0.0}, block, sample(SPEC, 3, seed=1))


def test_wilson_interval_bounds():
    assert wilson_interval(0.0, 0) == (0.0, 1.0)
    low, high = wilson_interval(0.05, 1000)
    assert 0.0 < low < 0.05 < high < 0.1
