"""
Separable convex QP by outer linearization
Each q_i (x_i - c_i)^2 becomes q_i u_i - 2 q_i c_i x_i + q_i c_i^2 with
tangent cuts u_i >= 2 a x_i - a^2; the cuts do not depend on c_i, so a
CutPool can carry them across successive ADMM solves.
"""
import logging
import math
import time
from typing import Callable, Dict, List, Optional

from models.errors import SolverError
from solvers.program import MathProgram, Sense, Solution, SolveStatus, evaluate

logger = logging.getLogger(__name__)

# a variable has converged once it sits within X_TOL of one of its tangent points
X_TOL = 1e-8
BRACKET_POINTS = 9
MAX_CUTS_PER_VAR = 400
MAX_POOL_SEED = 12

LpSolver = Callable[[MathProgram], Solution]


class CutPool:
    """Tangent points per variable name, reusable between solves"""

    def __init__(self):
        self.points: Dict[str, List[float]] = {}

    def add(self, name: str, point: float):
        points = self.points.setdefault(name, [])
        if all(abs(point - p) > 1e-9 for p in points):
            points.append(point)

    def seed(self, name: str, center: float) -> List[float]:
        """Stored points closest to the proximal centre"""
        points = self.points.get(name, [])
        return sorted(points, key=lambda p: abs(p - center))[:MAX_POOL_SEED]


def _initial_points(lb: float, ub: float, center: float, spread: int) -> List[float]:
    points = {0.0, center}
    for bound in (lb, ub):
        if math.isfinite(bound):
            points.add(bound)
    for k in range(spread + 1):
        for sign in (-1.0, 1.0):
            candidate = center + sign * 10.0 ** (k - 1)
            if lb <= candidate <= ub:
                points.add(candidate)
    return sorted(points)


def _refinement(x: float, points: List[float]) -> List[float]:
    """New tangent points: x itself plus a grid over the bracketing pair"""
    below = [p for p in points if p < x]
    above = [p for p in points if p > x]
    if not below or not above:
        return [x]
    lo, hi = max(below), min(above)
    step = (hi - lo) / (BRACKET_POINTS + 1)
    return [x] + [lo + i * step for i in range(1, BRACKET_POINTS + 1)]


def solve_qp_separable(
    program: MathProgram,
    lp_solver: LpSolver,
    pool: Optional[CutPool] = None,
    max_cuts: int = MAX_CUTS_PER_VAR,
) -> Solution:
    """Cutting-plane solve of a continuous program with a separable quadratic objective"""
    if program.integers:
        raise ValueError("solve_qp_separable does not handle integer variables")
    started = time.perf_counter()
    if not program.quadratic:
        return lp_solver(program)

    lp = program.copy(f"{program.name}-outer")
    lp.quadratic = {}
    aux: Dict[int, int] = {}
    for j, (q, center) in sorted(program.quadratic.items()):
        var = program.variables[j]
        u = lp.add_var(f"__u_{var.name}", lb=0.0, ub=math.inf)
        aux[j] = u
        lp.objective[u] = lp.objective.get(u, 0.0) + q
        lp.objective[j] = lp.objective.get(j, 0.0) - 2.0 * q * center
        lp.constant += q * center * center

    cut_counts = {j: 0 for j in aux}
    tangents: Dict[int, List[float]] = {j: [] for j in aux}

    def add_cut(j: int, point: float):
        if any(abs(point - p) <= 1e-12 for p in tangents[j]):
            return
        if cut_counts[j] >= max_cuts:
            raise SolverError(f"cut limit {max_cuts} exceeded for {program.variables[j].name}")
        lp.add_row({aux[j]: 1.0, j: -2.0 * point}, Sense.GE, -point * point, name=f"cut_{j}")
        tangents[j].append(point)
        cut_counts[j] += 1

    spread = 2
    for j, u in aux.items():
        var = program.variables[j]
        _, center = program.quadratic[j]
        points = set(_initial_points(var.lb, var.ub, center, spread))
        if pool is not None:
            points.update(p for p in pool.seed(var.name, center) if var.lb <= p <= var.ub)
        for point in sorted(points):
            add_cut(j, point)

    rounds = 0
    lp_iterations = 0
    while True:
        rounds += 1
        result = lp_solver(lp)
        lp_iterations += int(result.stats.get("iterations", 0))
        if result.status == SolveStatus.UNBOUNDED:
            # tangents too flat to bound a free direction: widen
            spread += 2
            if spread > 12:
                return Solution(SolveStatus.UNBOUNDED, stats={"rounds": rounds})
            for j in aux:
                var = program.variables[j]
                _, center = program.quadratic[j]
                for sign in (-1.0, 1.0):
                    point = center + sign * 10.0 ** spread
                    if var.lb <= point <= var.ub:
                        add_cut(j, point)
            continue
        if result.status != SolveStatus.OPTIMAL:
            return Solution(result.status, stats={"rounds": rounds, "iterations": lp_iterations})

        x = result.values
        added = 0
        for j in aux:
            xj = float(x[j])
            if min(abs(xj - p) for p in tangents[j]) <= X_TOL * (1.0 + abs(xj)):
                continue
            var = program.variables[j]
            for point in _refinement(min(max(xj, var.lb), var.ub), tangents[j]):
                if var.lb <= point <= var.ub:
                    add_cut(j, point)
            added += 1
        if not added:
            break

    values = x[:program.n_vars].copy()
    if pool is not None:
        for j in aux:
            pool.add(program.variables[j].name, float(values[j]))
    objective, _ = evaluate(program, values)
    logger.debug(f"QP {program.name}: {objective:.10g} after {rounds} cut rounds")
    return Solution(
        status=SolveStatus.OPTIMAL,
        values=values,
        objective=objective,
        stats={
            "rounds": rounds,
            "iterations": lp_iterations,
            "cuts": sum(cut_counts.values()),
            "wall_time": time.perf_counter() - started,
        },
    )
