"""
Best-first branch-and-bound over LP relaxations
Nodes are ordered by relaxation bound, ties broken by node id.
"""
import heapq
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Optional

import numpy as np

from solvers.program import MathProgram, Solution, SolveStatus, fix_variables

logger = logging.getLogger(__name__)

BRANCH_TOL = 1e-6
RELATIVE_GAP = 1e-6
MAX_NODES = 100_000

LpSolver = Callable[[MathProgram], Solution]


@dataclass(order=True)
class _Node:
    bound: float
    node_id: int
    bounds: Dict[int, tuple] = field(compare=False)
    relaxation: Solution = field(compare=False)


def _relax(program: MathProgram, bounds: Mapping[int, tuple]) -> MathProgram:
    relaxed = program.copy(f"{program.name}-node")
    for var in relaxed.variables:
        var.integer = False
    for j, (lo, hi) in bounds.items():
        relaxed.variables[j].lb = lo
        relaxed.variables[j].ub = hi
    return relaxed


def _most_fractional(values: np.ndarray, integers) -> Optional[int]:
    best, best_score = None, BRANCH_TOL
    for j in integers:
        frac = values[j] - math.floor(values[j])
        score = min(frac, 1.0 - frac)
        if score > best_score:
            best, best_score = j, score
    return best


def solve_milp(
    program: MathProgram,
    lp_solver: LpSolver,
    hint: Optional[Mapping[int, float]] = None,
    max_nodes: int = MAX_NODES,
    relative_gap: float = RELATIVE_GAP,
) -> Solution:
    """Exact MILP optimum (within relative_gap) or best incumbent at the node limit"""
    if program.quadratic:
        raise ValueError("solve_milp does not accept quadratic objectives")
    started = time.perf_counter()
    integers = program.integers
    for j in integers:
        var = program.variables[j]
        if not (math.isfinite(var.lb) and math.isfinite(var.ub)):
            raise ValueError(f"integer variable {var.name} needs finite bounds")

    incumbent: Optional[Solution] = None

    def try_incumbent(assignment: Mapping[int, float]):
        nonlocal incumbent
        leaf = lp_solver(fix_variables(program, assignment))
        if leaf.optimal and (incumbent is None or leaf.objective < incumbent.objective - 1e-12):
            incumbent = leaf
            logger.debug(f"B&B {program.name}: incumbent {leaf.objective:.10g}")

    if hint:
        try_incumbent(hint)

    root = lp_solver(_relax(program, {}))
    nodes = 1
    if root.status == SolveStatus.UNBOUNDED:
        return Solution(SolveStatus.UNBOUNDED, stats={"nodes": nodes})
    if root.status != SolveStatus.OPTIMAL:
        return Solution(root.status, stats={"nodes": nodes})

    try_incumbent({j: float(np.clip(round(root.values[j]), program.variables[j].lb, program.variables[j].ub))
                   for j in integers})

    heap = [_Node(root.objective, 0, {}, root)]
    next_id = 1
    status = SolveStatus.OPTIMAL
    while heap:
        node = heapq.heappop(heap)
        if incumbent is not None:
            tolerance = relative_gap * max(1.0, abs(incumbent.objective))
            if node.bound >= incumbent.objective - tolerance:
                # every remaining node is at least as bad
                heap.clear()
                break

        values = node.relaxation.values
        branch = _most_fractional(values, integers)
        if branch is None:
            try_incumbent({j: float(round(values[j])) for j in integers})
            continue
        if nodes >= max_nodes:
            status = SolveStatus.ITERATION_LIMIT
            logger.warning(f"⚠️ B&B {program.name}: node limit {max_nodes} reached")
            break

        var = program.variables[branch]
        lo, hi = node.bounds.get(branch, (var.lb, var.ub))
        for child_lo, child_hi in ((lo, float(math.floor(values[branch]))), (float(math.ceil(values[branch])), hi)):
            if child_lo > child_hi:
                continue
            child_bounds = dict(node.bounds)
            child_bounds[branch] = (child_lo, child_hi)
            relaxation = lp_solver(_relax(program, child_bounds))
            nodes += 1
            if not relaxation.optimal:
                continue
            if incumbent is not None and relaxation.objective >= incumbent.objective - relative_gap * max(1.0, abs(incumbent.objective)):
                continue
            heapq.heappush(heap, _Node(relaxation.objective, next_id, child_bounds, relaxation))
            next_id += 1

    stats = {"nodes": nodes, "wall_time": time.perf_counter() - started}
    if incumbent is None:
        final = SolveStatus.ITERATION_LIMIT if status == SolveStatus.ITERATION_LIMIT else SolveStatus.INFEASIBLE
        return Solution(final, stats=stats)

    values = incumbent.values.copy()
    for j in integers:
        values[j] = float(round(values[j]))
    logger.debug(f"B&B {program.name}: {status.value} {incumbent.objective:.10g} in {nodes} nodes")
    return Solution(status=status, values=values, objective=incumbent.objective, stats=stats)
