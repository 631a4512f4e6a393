"""
LP, separable QP and MILP back ends against brute-force references
"""
import itertools
import math

import numpy as np
import pytest

from solvers.backend import choose_backend, solve
from solvers.highs import solve_lp_highs, solve_milp_highs
from solvers.milp import solve_milp
from solvers.program import MathProgram, Sense, SolveStatus, evaluate, export_lp, fix_variables, merge_programs
from solvers.qp import CutPool, solve_qp_separable
from solvers.simplex import solve_lp

LP_SOLVERS = [solve_lp, solve_lp_highs]


def random_lp(seed: int, n: int = 3, m: int = 3):
    """Box-bounded LP that is feasible at the origin"""
    rng = np.random.default_rng(seed)
    a = rng.uniform(0.1, 2.0, size=(m, n))
    b = rng.uniform(1.0, 5.0, size=m)
    c = rng.uniform(-2.0, 1.0, size=n)
    program = MathProgram(f"lp{seed}")
    for j in range(n):
        program.add_var(f"x{j}", 0.0, 4.0, cost=c[j])
    for i in range(m):
        program.add_row({j: a[i, j] for j in range(n)}, Sense.LE, b[i])
    return program, a, b, c


def vertex_minimum(a, b, c, ub=4.0) -> float:
    """Minimum of c.x over every vertex of {a x <= b, 0 <= x <= ub}"""
    n = len(c)
    rows = [(a[i], b[i]) for i in range(len(b))]
    rows += [(np.eye(n)[j], ub) for j in range(n)]
    rows += [(-np.eye(n)[j], 0.0) for j in range(n)]
    best = math.inf
    for subset in itertools.combinations(rows, n):
        matrix = np.array([r[0] for r in subset])
        if abs(np.linalg.det(matrix)) < 1e-10:
            continue
        x = np.linalg.solve(matrix, np.array([r[1] for r in subset]))
        if np.all(a @ x <= b + 1e-9) and np.all(x >= -1e-9) and np.all(x <= ub + 1e-9):
            best = min(best, float(c @ x))
    return best


@pytest.mark.parametrize("lp_solver", LP_SOLVERS)
@pytest.mark.parametrize("seed", range(20))
def test_lp_matches_vertex_enumeration(lp_solver, seed):
    program, a, b, c = random_lp(seed)
    solution = lp_solver(program)
    assert solution.status == SolveStatus.OPTIMAL
    assert solution.objective == pytest.approx(vertex_minimum(a, b, c), abs=1e-6)
    _, residual = evaluate(program, solution.values)
    assert residual <= 1e-7


@pytest.mark.parametrize("lp_solver", LP_SOLVERS)
@pytest.mark.parametrize("seed", range(5))
def test_lp_duality_gap(lp_solver, seed):
    program, *_ = random_lp(seed, n=5, m=4)
    program.add_row({0: 1.0, 1: 1.0}, Sense.GE, 0.2)
    program.add_row({2: 1.0, 3: -1.0}, Sense.EQ, 0.1)
    solution = lp_solver(program)
    assert solution.optimal
    assert abs(solution.dual_objective - solution.objective) <= 1e-6


@pytest.mark.parametrize("lp_solver", LP_SOLVERS)
def test_lp_infeasible(lp_solver):
    program = MathProgram("infeasible")
    x = program.add_var("x", 0.0, 1.0)
    program.add_row({x: 1.0}, Sense.GE, 2.0)
    assert lp_solver(program).status == SolveStatus.INFEASIBLE


@pytest.mark.parametrize("lp_solver", LP_SOLVERS)
def test_lp_unbounded(lp_solver):
    program = MathProgram("unbounded")
    x = program.add_var("x", 0.0, math.inf, cost=-1.0)
    y = program.add_var("y", 0.0, math.inf)
    program.add_row({x: 1.0, y: -1.0}, Sense.LE, 1.0)
    assert lp_solver(program).status == SolveStatus.UNBOUNDED


def test_lp_free_variable_and_constant():
    program = MathProgram("free")
    x = program.add_var("x", -math.inf, math.inf, cost=1.0)
    program.add_row({x: 1.0}, Sense.GE, -3.0)
    program.add_constant(2.0)
    solution = solve_lp(program)
    assert solution.values[x] == pytest.approx(-3.0)
    assert solution.objective == pytest.approx(-1.0)


@pytest.mark.parametrize("seed", range(5))
def test_separable_qp_matches_closed_form(seed):
    rng = np.random.default_rng(100 + seed)
    program = MathProgram("qp")
    expected = []
    for j in range(10):
        lb, ub = rng.uniform(-2.0, 0.0), rng.uniform(0.0, 2.0)
        q, center, cost = rng.uniform(0.5, 3.0), rng.uniform(-3.0, 3.0), rng.uniform(-1.0, 1.0)
        index = program.add_var(f"x{j}", lb, ub, cost=cost)
        program.add_quadratic(index, q, center)
        expected.append(float(np.clip(center - cost / (2 * q), lb, ub)))
    solution = solve_qp_separable(program, solve_lp)
    assert solution.optimal
    np.testing.assert_allclose(solution.values, expected, atol=1e-4)


def proximal_pair() -> MathProgram:
    """min 0.3x + 2(x - 0.7)^2 + 2(y + 0.2)^2 with x + y = 1; optimum x = 0.9125"""
    program = MathProgram("prox")
    x = program.add_var("x", -5.0, 5.0, cost=0.3)
    y = program.add_var("y", -5.0, 5.0)
    program.add_row({x: 1.0, y: 1.0}, Sense.EQ, 1.0)
    program.add_quadratic(x, 2.0, 0.7)
    program.add_quadratic(y, 2.0, -0.2)
    return program


@pytest.mark.parametrize("backend", ["builtin", "highs"])
def test_cut_pool_carries_tangents(backend):
    program = proximal_pair()
    pool = CutPool()
    first = solve(program, backend, pool)
    second = solve(program, backend, pool)
    assert first.values == pytest.approx([0.9125, 0.0875], abs=1e-7)
    assert second.values == pytest.approx([0.9125, 0.0875], abs=1e-7)
    assert second.stats["rounds"] <= first.stats["rounds"]
    assert pool.points["x"]


@pytest.mark.parametrize("center", [0.7, 0.70001, 0.6999])
def test_pool_seeded_solve_is_exact_for_a_shifted_centre(center):
    pool = CutPool()
    solve(proximal_pair(), "highs", pool)
    program = proximal_pair()
    program.add_quadratic(0, 2.0, center)
    solution = solve(program, "highs", pool)
    # 0.3 + 4(x - c) - 4(1.2 - x) = 0
    assert solution.values[0] == pytest.approx((4.5 + 4.0 * center) / 8.0, abs=1e-7)


def test_quadratic_programs_route_to_highs():
    program = proximal_pair()
    assert choose_backend(program) == "highs"
    assert choose_backend(program, "builtin") == "builtin"
    assert solve(program).stats["backend"] == "highs"


def knapsack(seed: int):
    rng = np.random.default_rng(seed)
    value = rng.integers(1, 20, size=8).astype(float)
    weight = rng.integers(1, 10, size=8).astype(float)
    capacity = float(weight.sum() // 2)
    program = MathProgram(f"knapsack{seed}")
    for j in range(8):
        program.add_var(f"b{j}", 0.0, 1.0, cost=-value[j], integer=True)
    program.add_row({j: weight[j] for j in range(8)}, Sense.LE, capacity)
    best = max(
        sum(value[j] for j in range(8) if bits[j])
        for bits in itertools.product([0, 1], repeat=8)
        if sum(weight[j] for j in range(8) if bits[j]) <= capacity
    )
    return program, -best


@pytest.mark.parametrize("seed", range(4))
def test_milp_matches_enumeration(seed):
    program, expected = knapsack(seed)
    builtin = solve_milp(program, solve_lp)
    highs = solve_milp_highs(program)
    assert builtin.status == SolveStatus.OPTIMAL
    assert builtin.objective == pytest.approx(expected, abs=1e-6)
    assert highs.objective == pytest.approx(expected, abs=1e-6)


def test_milp_integer_infeasible():
    program = MathProgram("odd")
    a = program.add_binary("a")
    b = program.add_binary("b")
    program.add_row({a: 1.0, b: 1.0}, Sense.EQ, 1.5)
    assert solve_milp(program, solve_lp).status == SolveStatus.INFEASIBLE
    assert solve_milp_highs(program).status == SolveStatus.INFEASIBLE


def test_fixing_the_optimal_leaf_reproduces_the_optimum():
    program, expected = knapsack(7)
    optimum = solve_milp(program, solve_lp)
    leaf = fix_variables(program, {j: optimum.values[j] for j in program.integers})
    assert leaf.is_lp
    assert solve_lp(leaf).objective == pytest.approx(optimum.objective, abs=1e-9)


def test_empty_assignment_is_identity():
    program, _ = knapsack(1)
    same = fix_variables(program, {})
    assert [(v.name, v.lb, v.ub, v.integer) for v in same.variables] == \
        [(v.name, v.lb, v.ub, v.integer) for v in program.variables]
    assert len(same.rows) == len(program.rows)


def test_fix_outside_bounds_is_rejected():
    program, _ = knapsack(1)
    with pytest.raises(ValueError):
        fix_variables(program, {"b0": 2.0})


def test_merge_programs_is_a_disjoint_union():
    left, _ = knapsack(2)
    right = MathProgram("right")
    right.add_var("z", 0.0, 1.0, cost=1.0, group="fuel")
    right.add_constant(0.5, group="fuel")
    merged = merge_programs("both", [left, right])
    assert merged.n_vars == left.n_vars + 1
    assert len(merged.rows) == len(left.rows)
    assert merged.constant == 0.5
    assert merged.group_values(np.ones(merged.n_vars))["fuel"] == pytest.approx(1.5)


def test_quadratic_with_integers_is_refused():
    program = MathProgram("mixed")
    x = program.add_var("x", 0.0, 1.0)
    program.add_binary("b")
    program.add_quadratic(x, 1.0, 0.0)
    with pytest.raises(ValueError):
        solve(program, "builtin")


def test_backend_choice(monkeypatch):
    small, _ = knapsack(0)
    assert choose_backend(small) == "builtin"
    assert choose_backend(small, "highs") == "highs"
    monkeypatch.setenv("CFCSED_BUILTIN_MAX_VARS", "4")
    from config import get_settings
    get_settings.cache_clear()
    assert choose_backend(small) == "highs"
    with pytest.raises(ValueError):
        choose_backend(small, "cplex")


def test_export_lp_layout():
    program, _ = knapsack(3)
    program.add_var("free var", -math.inf, math.inf)
    text = export_lp(program)
    assert text.startswith("\\ knapsack3\nMinimize\n obj: ")
    assert "Subject To" in text
    assert "free_var free" in text
    assert "Binaries\n b0 b1 b2 b3 b4 b5 b6 b7" in text
    assert text.endswith("End\n")
    assert export_lp(program) == text
