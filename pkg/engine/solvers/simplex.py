"""
Dense-tableau two-phase primal simplex
Dantzig pricing, switching to Bland's rule after a run of degenerate pivots.
"""
import logging
import time
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from solvers.program import FEASIBILITY_TOL, MathProgram, Sense, Solution, SolveStatus

logger = logging.getLogger(__name__)

PIVOT_TOL = 1e-9
REDUCED_COST_TOL = 1e-9
DEGENERATE_LIMIT = 50
MAX_PIVOTS = 1_000_000


@dataclass
class _StandardForm:
    """min c.x' + const s.t. A x' (senses) b, x' >= 0 with x = offset + T x'"""
    a: np.ndarray
    senses: List[Sense]
    b: np.ndarray
    c: np.ndarray
    const: float
    offset: np.ndarray
    transform: np.ndarray
    n_rows_original: int


def _standard_form(program: MathProgram) -> _StandardForm:
    lb, ub = program.bounds()
    n = program.n_vars
    entries: List[List[Tuple[int, float]]] = []
    offset = np.zeros(n)
    bound_rows: List[Tuple[int, float]] = []
    width = 0
    for j in range(n):
        lo, hi = lb[j], ub[j]
        if np.isfinite(lo):
            offset[j] = lo
            entries.append([(width, 1.0)])
            if np.isfinite(hi):
                bound_rows.append((width, hi - lo))
            width += 1
        elif np.isfinite(hi):
            # mirror: x = hi - x'
            offset[j] = hi
            entries.append([(width, -1.0)])
            width += 1
        else:
            entries.append([(width, 1.0), (width + 1, -1.0)])
            width += 2

    transform = np.zeros((n, width))
    for j, cols in enumerate(entries):
        for col, sign in cols:
            transform[j, col] = sign

    a, senses, b = program.dense_rows()
    c = program.cost_vector()
    a_std = a @ transform if len(program.rows) else np.zeros((0, width))
    b_std = b - a @ offset if len(program.rows) else np.zeros(0)
    if bound_rows:
        extra = np.zeros((len(bound_rows), width))
        for i, (col, _) in enumerate(bound_rows):
            extra[i, col] = 1.0
        a_std = np.vstack([a_std, extra])
        b_std = np.concatenate([b_std, [cap for _, cap in bound_rows]])
        senses = list(senses) + [Sense.LE] * len(bound_rows)
    return _StandardForm(
        a=a_std, senses=list(senses), b=b_std, c=c @ transform,
        const=float(c @ offset) + program.constant,
        offset=offset, transform=transform, n_rows_original=len(program.rows),
    )


def _pivot(tab: np.ndarray, rc: np.ndarray, p: int, q: int):
    tab[p] /= tab[p, q]
    column = tab[:, q].copy()
    column[p] = 0.0
    tab -= np.outer(column, tab[p])
    rc -= rc[q] * tab[p]
    rhs = tab[:, -1]
    rhs[(rhs < 0) & (rhs > -1e-11)] = 0.0


class _Counter:
    def __init__(self, limit: int):
        self.pivots = 0
        self.limit = limit


def _iterate(tab: np.ndarray, rc: np.ndarray, basis: np.ndarray, eligible: np.ndarray,
             counter: _Counter) -> SolveStatus:
    degenerate = 0
    bland = False
    while True:
        if counter.pivots >= counter.limit:
            return SolveStatus.ITERATION_LIMIT
        candidates = np.where(eligible & (rc[:-1] < -REDUCED_COST_TOL))[0]
        if len(candidates) == 0:
            return SolveStatus.OPTIMAL
        q = int(candidates[0]) if bland else int(candidates[np.argmin(rc[candidates])])

        column = tab[:, q]
        rows = np.where(column > PIVOT_TOL)[0]
        if len(rows) == 0:
            return SolveStatus.UNBOUNDED
        ratios = tab[rows, -1] / column[rows]
        best = ratios.min()
        ties = rows[ratios <= best + 1e-12 * (1.0 + abs(best))]
        p = int(ties[np.argmin(basis[ties])])

        _pivot(tab, rc, p, q)
        basis[p] = q
        counter.pivots += 1
        if best <= 1e-12:
            degenerate += 1
            if degenerate >= DEGENERATE_LIMIT and not bland:
                logger.debug(f"{degenerate} degenerate pivots, switching to Bland's rule")
                bland = True
        else:
            degenerate = 0
            bland = False


def solve_lp(program: MathProgram, max_pivots: int = MAX_PIVOTS) -> Solution:
    """Optimal basic solution, or a phase-1 infeasibility / unboundedness certificate"""
    if not program.is_lp:
        raise ValueError("solve_lp needs a program without integers or quadratic terms")
    started = time.perf_counter()
    std = _standard_form(program)
    m, n = std.a.shape

    # make every right-hand side non-negative
    a = std.a.copy()
    b = std.b.copy()
    senses = list(std.senses)
    row_sign = np.ones(m)
    for i in range(m):
        if b[i] < 0:
            a[i] *= -1.0
            b[i] *= -1.0
            row_sign[i] = -1.0
            senses[i] = {Sense.LE: Sense.GE, Sense.GE: Sense.LE, Sense.EQ: Sense.EQ}[senses[i]]

    n_slack = sum(1 for s in senses if s != Sense.EQ)
    n_art = sum(1 for s in senses if s != Sense.LE)
    width = n + n_slack + n_art
    full = np.zeros((m, width))
    full[:, :n] = a
    basis = np.zeros(m, dtype=int)
    artificial = np.zeros(width, dtype=bool)
    slack_col, art_col = n, n + n_slack
    for i, sense in enumerate(senses):
        if sense == Sense.LE:
            full[i, slack_col] = 1.0
            basis[i] = slack_col
            slack_col += 1
        elif sense == Sense.GE:
            full[i, slack_col] = -1.0
            slack_col += 1
            full[i, art_col] = 1.0
            artificial[art_col] = True
            basis[i] = art_col
            art_col += 1
        else:
            full[i, art_col] = 1.0
            artificial[art_col] = True
            basis[i] = art_col
            art_col += 1

    tab = np.hstack([full, b[:, None]])
    counter = _Counter(max_pivots)
    rows_kept = np.arange(m)

    # phase 1: minimize the sum of artificials
    if n_art:
        cost1 = artificial.astype(float)
        rc = np.concatenate([cost1, [0.0]]) - cost1[basis] @ tab
        status = _iterate(tab, rc, basis, np.ones(width, dtype=bool), counter)
        if status == SolveStatus.ITERATION_LIMIT:
            return Solution(status, stats={"iterations": counter.pivots, "wall_time": time.perf_counter() - started})
        if -rc[-1] > FEASIBILITY_TOL:
            logger.debug(f"phase 1 residual {-rc[-1]:.3e}, program {program.name} infeasible")
            return Solution(SolveStatus.INFEASIBLE,
                            stats={"iterations": counter.pivots, "wall_time": time.perf_counter() - started})
        # drive remaining artificials out of the basis, dropping redundant rows
        keep = []
        dummy = np.zeros(width + 1)
        for i in range(len(basis)):
            if artificial[basis[i]]:
                options = np.where(~artificial & (np.abs(tab[i, :-1]) > PIVOT_TOL))[0]
                if len(options) == 0:
                    continue
                q = int(options[0])
                _pivot(tab, dummy, i, q)
                basis[i] = q
            keep.append(i)
        keep = np.array(keep, dtype=int)
        tab, basis, rows_kept = tab[keep], basis[keep], rows_kept[keep]

    # phase 2
    cost = np.zeros(width)
    cost[:n] = std.c
    rc = np.concatenate([cost, [0.0]]) - cost[basis] @ tab
    status = _iterate(tab, rc, basis, ~artificial, counter)
    stats = {"iterations": counter.pivots, "wall_time": time.perf_counter() - started}
    if status != SolveStatus.OPTIMAL:
        return Solution(status, stats=stats)

    # recompute the basic solution and duals from the original data
    basis_matrix = full[rows_kept][:, basis]
    try:
        x_basic = np.linalg.solve(basis_matrix, b[rows_kept])
        y_kept = np.linalg.solve(basis_matrix.T, cost[basis])
    except np.linalg.LinAlgError:
        x_basic = tab[:, -1]
        y_kept = np.linalg.lstsq(basis_matrix.T, cost[basis], rcond=None)[0]
    x_full = np.zeros(width)
    x_full[basis] = x_basic
    x_std = np.maximum(x_full[:n], 0.0)

    y = np.zeros(m)
    y[rows_kept] = y_kept
    y_std = y * row_sign
    values = std.offset + std.transform @ x_std
    objective = float(program.cost_vector() @ values) + program.constant
    dual_objective = float(y_std @ std.b) + std.const
    logger.debug(f"LP {program.name}: optimal {objective:.10g} after {counter.pivots} pivots")
    return Solution(
        status=SolveStatus.OPTIMAL,
        values=values,
        objective=objective,
        duals=y_std[:std.n_rows_original],
        dual_objective=dual_objective,
        stats=stats,
    )
