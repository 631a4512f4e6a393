"""
Solver backend selection
Routes a MathProgram to the built-in solvers or to HiGHS.
"""
import logging
from typing import Callable, Mapping, Optional

from config import get_settings
from solvers.highs import solve_lp_highs, solve_milp_highs
from solvers.milp import solve_milp
from solvers.program import MathProgram, Solution
from solvers.qp import CutPool, solve_qp_separable
from solvers.simplex import solve_lp

logger = logging.getLogger(__name__)

BACKENDS = ("auto", "builtin", "highs")


def choose_backend(program: MathProgram, backend: Optional[str] = None) -> str:
    """Concrete backend name for a program ('auto' resolves by size)"""
    settings = get_settings()
    backend = backend or settings.solver_backend
    if backend not in BACKENDS:
        raise ValueError(f"unknown solver backend {backend!r}")
    if backend != "auto":
        return backend
    if program.quadratic:
        # quadratic programs always go to HiGHS
        return "highs"
    small = (
        program.n_vars <= settings.builtin_max_vars
        and len(program.integers) <= settings.builtin_max_binaries
    )
    return "builtin" if small else "highs"


def lp_solver_for(backend: str) -> Callable[[MathProgram], Solution]:
    return solve_lp if backend == "builtin" else solve_lp_highs


def solve(
    program: MathProgram,
    backend: Optional[str] = None,
    pool: Optional[CutPool] = None,
    hint: Optional[Mapping[int, float]] = None,
) -> Solution:
    """Solve an LP, separable QP or MILP with the selected backend"""
    chosen = choose_backend(program, backend)
    lp = lp_solver_for(chosen)
    if program.integers:
        if program.quadratic:
            raise ValueError(f"{program.name}: quadratic terms with integer variables are not supported")
        if chosen == "highs":
            solution = solve_milp_highs(program)
        else:
            solution = solve_milp(program, lp, hint=hint)
    elif program.quadratic:
        solution = solve_qp_separable(program, lp, pool=pool)
    else:
        solution = lp(program)
    solution.stats["backend"] = chosen
    logger.debug(f"{program.name}: {solution.status.value} via {chosen} ({program.n_vars} vars, {len(program.rows)} rows)")
    return solution
