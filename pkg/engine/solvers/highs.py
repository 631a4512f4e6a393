"""
HiGHS backend through scipy.optimize
"""
import logging
import math
import time

import numpy as np
from scipy import sparse
from scipy.optimize import Bounds, LinearConstraint, linprog, milp

from solvers.program import MathProgram, Sense, Solution, SolveStatus

logger = logging.getLogger(__name__)

LINPROG_STATUS = {
    0: SolveStatus.OPTIMAL,
    1: SolveStatus.ITERATION_LIMIT,
    2: SolveStatus.INFEASIBLE,
    3: SolveStatus.UNBOUNDED,
}


def _matrix(program: MathProgram, rows) -> sparse.csr_matrix:
    data, ri, ci = [], [], []
    for i, row in enumerate(rows):
        for j, a in row.coeffs.items():
            data.append(a)
            ri.append(i)
            ci.append(j)
    return sparse.csr_matrix((data, (ri, ci)), shape=(len(rows), program.n_vars))


def solve_lp_highs(program: MathProgram) -> Solution:
    """LP through linprog(method='highs') with row duals"""
    started = time.perf_counter()
    ub_rows = [(i, r) for i, r in enumerate(program.rows) if r.sense != Sense.EQ]
    eq_rows = [(i, r) for i, r in enumerate(program.rows) if r.sense == Sense.EQ]
    # >= rows are negated into <= form
    ub_sign = np.array([1.0 if r.sense == Sense.LE else -1.0 for _, r in ub_rows])
    a_ub = _matrix(program, [r for _, r in ub_rows])
    if len(ub_rows):
        a_ub = sparse.diags(ub_sign) @ a_ub
    b_ub = np.array([r.rhs for _, r in ub_rows]) * ub_sign if ub_rows else None
    a_eq = _matrix(program, [r for _, r in eq_rows]) if eq_rows else None
    b_eq = np.array([r.rhs for _, r in eq_rows]) if eq_rows else None
    lb, ub = program.bounds()
    bounds = [(None if math.isinf(l) else l, None if math.isinf(u) else u) for l, u in zip(lb, ub)]

    c = program.cost_vector()
    result = linprog(
        c,
        A_ub=a_ub if ub_rows else None, b_ub=b_ub,
        A_eq=a_eq, b_eq=b_eq,
        bounds=bounds, method="highs",
    )
    status = LINPROG_STATUS.get(result.status, SolveStatus.INFEASIBLE)
    stats = {"iterations": int(getattr(result, "nit", 0)), "wall_time": time.perf_counter() - started}
    if status != SolveStatus.OPTIMAL:
        return Solution(status, stats=stats)

    duals = np.zeros(len(program.rows))
    dual_objective = program.constant
    if ub_rows:
        marginals = result.ineqlin.marginals * ub_sign
        for (i, row), y in zip(ub_rows, marginals):
            duals[i] = y
            dual_objective += y * row.rhs
    if eq_rows:
        for (i, row), y in zip(eq_rows, result.eqlin.marginals):
            duals[i] = y
            dual_objective += y * row.rhs
    for bound, marginals in ((lb, result.lower.marginals), (ub, result.upper.marginals)):
        finite = np.isfinite(bound)
        dual_objective += float(np.sum(bound[finite] * marginals[finite]))

    values = np.asarray(result.x, dtype=float)
    objective = float(c @ values) + program.constant
    return Solution(SolveStatus.OPTIMAL, values=values, objective=objective, duals=duals,
                    dual_objective=float(dual_objective), stats=stats)


def solve_milp_highs(program: MathProgram, time_limit: float = 600.0) -> Solution:
    """MILP through scipy.optimize.milp"""
    started = time.perf_counter()
    c = program.cost_vector()
    lb, ub = program.bounds()
    constraints = []
    if program.rows:
        a = _matrix(program, program.rows)
        lo = np.array([r.rhs if r.sense != Sense.LE else -np.inf for r in program.rows])
        hi = np.array([r.rhs if r.sense != Sense.GE else np.inf for r in program.rows])
        constraints.append(LinearConstraint(a, lo, hi))
    integrality = np.array([1 if v.integer else 0 for v in program.variables])
    result = milp(
        c, constraints=constraints, integrality=integrality, bounds=Bounds(lb, ub),
        options={"time_limit": time_limit, "mip_rel_gap": 1e-6},
    )
    stats = {"wall_time": time.perf_counter() - started}
    if result.status == 0:
        values = np.asarray(result.x, dtype=float)
        for j in program.integers:
            values[j] = float(round(values[j]))
        return Solution(SolveStatus.OPTIMAL, values=values,
                        objective=float(c @ values) + program.constant, stats=stats)
    if result.status == 1 and result.x is not None:
        values = np.asarray(result.x, dtype=float)
        return Solution(SolveStatus.ITERATION_LIMIT, values=values,
                        objective=float(c @ values) + program.constant, stats=stats)
    status = {2: SolveStatus.INFEASIBLE, 3: SolveStatus.UNBOUNDED}.get(result.status, SolveStatus.INFEASIBLE)
    logger.debug(f"HiGHS MILP {program.name}: {result.message}")
    return Solution(status, stats=stats)
