"""
Solver-agnostic math program representation
minimize  c.x + constant + sum_i q_i (x_i - c_i)^2  subject to sparse linear rows
"""
import enum
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

FEASIBILITY_TOL = 1e-7
INTEGRALITY_TOL = 1e-9

Coeffs = Union[Mapping[int, float], Iterable[Tuple[int, float]]]


class Sense(str, enum.Enum):
    LE = "<="
    EQ = "="
    GE = ">="


class SolveStatus(str, enum.Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    ITERATION_LIMIT = "iteration_limit"


@dataclass
class Variable:
    name: str
    lb: float = 0.0
    ub: float = math.inf
    integer: bool = False


@dataclass
class Row:
    coeffs: Dict[int, float]
    sense: Sense
    rhs: float
    name: str = ""

    def activity(self, values: np.ndarray) -> float:
        return sum(a * values[j] for j, a in self.coeffs.items())

    def violation(self, values: np.ndarray) -> float:
        """Amount by which the row is violated (0 when satisfied)"""
        lhs = self.activity(values)
        if self.sense == Sense.LE:
            return max(0.0, lhs - self.rhs)
        if self.sense == Sense.GE:
            return max(0.0, self.rhs - lhs)
        return abs(lhs - self.rhs)


@dataclass
class Solution:
    status: SolveStatus
    values: Optional[np.ndarray] = None
    objective: float = math.nan
    duals: Optional[np.ndarray] = None
    dual_objective: Optional[float] = None
    stats: Dict[str, float] = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == SolveStatus.OPTIMAL


class MathProgram:
    """Builder for LP / separable QP / MILP instances"""

    def __init__(self, name: str = "program"):
        self.name = name
        self.variables: List[Variable] = []
        self.rows: List[Row] = []
        self.objective: Dict[int, float] = {}
        self.constant = 0.0
        self.quadratic: Dict[int, Tuple[float, float]] = {}
        self.cost_groups: Dict[str, Tuple[Dict[int, float], float]] = {}
        self._index: Dict[str, int] = {}

    # construction

    def add_var(self, name: str, lb: float = 0.0, ub: float = math.inf, cost: float = 0.0,
                integer: bool = False, group: Optional[str] = None) -> int:
        if name in self._index:
            raise ValueError(f"duplicate variable {name}")
        if lb > ub:
            raise ValueError(f"variable {name}: lb {lb} > ub {ub}")
        index = len(self.variables)
        self.variables.append(Variable(name, float(lb), float(ub), integer))
        self._index[name] = index
        if cost:
            self.add_cost(index, cost, group)
        return index

    def add_binary(self, name: str) -> int:
        return self.add_var(name, 0.0, 1.0, integer=True)

    def add_row(self, coeffs: Coeffs, sense: Union[Sense, str], rhs: float, name: str = "") -> int:
        merged: Dict[int, float] = {}
        items = coeffs.items() if isinstance(coeffs, Mapping) else coeffs
        for j, a in items:
            if a:
                merged[j] = merged.get(j, 0.0) + float(a)
        merged = {j: a for j, a in merged.items() if a != 0.0}
        self.rows.append(Row(merged, Sense(sense), float(rhs), name))
        return len(self.rows) - 1

    def add_cost(self, index: int, coef: float, group: Optional[str] = None):
        self.objective[index] = self.objective.get(index, 0.0) + coef
        if group:
            linear, const = self.cost_groups.get(group, ({}, 0.0))
            linear[index] = linear.get(index, 0.0) + coef
            self.cost_groups[group] = (linear, const)

    def add_constant(self, value: float, group: Optional[str] = None):
        self.constant += value
        if group:
            linear, const = self.cost_groups.get(group, ({}, 0.0))
            self.cost_groups[group] = (linear, const + value)

    def add_quadratic(self, index: int, q: float, center: float):
        if q < 0:
            raise ValueError("quadratic weights must be non-negative")
        if q > 0:
            self.quadratic[index] = (float(q), float(center))

    # queries

    def index(self, name: str) -> int:
        return self._index[name]

    def has(self, name: str) -> bool:
        return name in self._index

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    @property
    def integers(self) -> List[int]:
        return [j for j, v in enumerate(self.variables) if v.integer]

    @property
    def is_lp(self) -> bool:
        return not self.quadratic and not self.integers

    def value(self, solution: Solution, name: str) -> float:
        return float(solution.values[self._index[name]])

    def copy(self, name: Optional[str] = None) -> "MathProgram":
        other = MathProgram(name or self.name)
        other.variables = [Variable(v.name, v.lb, v.ub, v.integer) for v in self.variables]
        other.rows = [Row(dict(r.coeffs), r.sense, r.rhs, r.name) for r in self.rows]
        other.objective = dict(self.objective)
        other.constant = self.constant
        other.quadratic = dict(self.quadratic)
        other.cost_groups = {g: (dict(lin), c) for g, (lin, c) in self.cost_groups.items()}
        other._index = dict(self._index)
        return other

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return (np.array([v.lb for v in self.variables], dtype=float),
                np.array([v.ub for v in self.variables], dtype=float))

    def cost_vector(self) -> np.ndarray:
        c = np.zeros(self.n_vars)
        for j, a in self.objective.items():
            c[j] = a
        return c

    def dense_rows(self) -> Tuple[np.ndarray, List[Sense], np.ndarray]:
        a = np.zeros((len(self.rows), self.n_vars))
        for i, row in enumerate(self.rows):
            for j, coef in row.coeffs.items():
                a[i, j] = coef
        return a, [r.sense for r in self.rows], np.array([r.rhs for r in self.rows], dtype=float)

    def group_values(self, values: np.ndarray) -> Dict[str, float]:
        return {
            group: sum(a * values[j] for j, a in linear.items()) + const
            for group, (linear, const) in self.cost_groups.items()
        }


def evaluate(program: MathProgram, values: Sequence[float]) -> Tuple[float, float]:
    """(objective, worst row or bound violation) at a point"""
    x = np.asarray(values, dtype=float)
    objective = float(program.cost_vector() @ x) + program.constant
    for j, (q, center) in program.quadratic.items():
        objective += q * (x[j] - center) ** 2
    residual = max((row.violation(x) for row in program.rows), default=0.0)
    lb, ub = program.bounds()
    if len(x):
        residual = max(residual, float(np.max(np.maximum(lb - x, 0.0))), float(np.max(np.maximum(x - ub, 0.0))))
    return objective, residual


def fix_variables(program: MathProgram, assignment: Mapping[Union[int, str], float]) -> MathProgram:
    """Pin variables to given values; fixed variables lose their integrality flag"""
    fixed = program.copy()
    for key, value in assignment.items():
        j = program.index(key) if isinstance(key, str) else int(key)
        var = fixed.variables[j]
        if not var.lb - INTEGRALITY_TOL <= value <= var.ub + INTEGRALITY_TOL:
            raise ValueError(f"value {value} for {var.name} outside [{var.lb}, {var.ub}]")
        var.lb = var.ub = float(value)
        var.integer = False
    return fixed


def merge_programs(name: str, parts: Sequence[MathProgram]) -> MathProgram:
    """Disjoint union of programs; variable names must not collide"""
    merged = MathProgram(name)
    for part in parts:
        offset = [
            merged.add_var(v.name, v.lb, v.ub, integer=v.integer) for v in part.variables
        ]
        for row in part.rows:
            merged.add_row({offset[j]: a for j, a in row.coeffs.items()}, row.sense, row.rhs, row.name)
        for j, a in part.objective.items():
            merged.add_cost(offset[j], a)
        merged.add_constant(part.constant)
        for j, (q, center) in part.quadratic.items():
            merged.add_quadratic(offset[j], q, center)
        for group, (linear, const) in part.cost_groups.items():
            merged.cost_groups[group] = ({offset[j]: a for j, a in linear.items()}, const)
    return merged


def _lp_number(value: float) -> str:
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return f"{value:.12g}"


def _lp_terms(coeffs: Mapping[int, float], names: List[str]) -> str:
    parts = []
    for j in sorted(coeffs):
        a = coeffs[j]
        sign = "-" if a < 0 else "+"
        parts.append(f"{sign} {_lp_number(abs(a))} {names[j]}")
    text = " ".join(parts) or "0"
    return text[2:] if text.startswith("+ ") else text


def export_lp(program: MathProgram) -> str:
    """CPLEX LP text with deterministic formatting"""
    names = [v.name.replace(" ", "_") for v in program.variables]
    lines = [f"\\ {program.name}", "Minimize"]
    linear = dict(program.objective)
    constant = program.constant
    for j, (q, center) in program.quadratic.items():
        # q (x - c)^2 = q x^2 - 2 q c x + q c^2
        linear[j] = linear.get(j, 0.0) - 2 * q * center
        constant += q * center * center
    objective = " obj: " + _lp_terms({j: a for j, a in linear.items() if a}, names)
    if constant:
        objective += f" + {_lp_number(constant)} __const"
    if program.quadratic:
        quad = [f"{_lp_number(2 * program.quadratic[j][0])} {names[j]} ^ 2" for j in sorted(program.quadratic)]
        objective += " + [ " + " + ".join(quad) + " ] / 2"
    lines.append(objective)
    lines.append("Subject To")
    for i, row in enumerate(program.rows):
        label = row.name.replace(" ", "_") or f"r{i}"
        lines.append(f" {label}_{i}: {_lp_terms(row.coeffs, names)} {row.sense.value} {_lp_number(row.rhs)}")
    lines.append("Bounds")
    if constant:
        lines.append(" __const = 1")
    for j, var in enumerate(program.variables):
        if var.lb == var.ub:
            lines.append(f" {names[j]} = {_lp_number(var.lb)}")
        elif math.isinf(var.lb) and math.isinf(var.ub):
            lines.append(f" {names[j]} free")
        else:
            lines.append(f" {_lp_number(var.lb)} <= {names[j]} <= {_lp_number(var.ub)}")
    integers = [names[j] for j in program.integers]
    if integers:
        binaries = [names[j] for j in program.integers if program.variables[j].lb >= 0 and program.variables[j].ub <= 1]
        general = [n for n in integers if n not in set(binaries)]
        if binaries:
            lines.append("Binaries")
            lines.append(" " + " ".join(binaries))
        if general:
            lines.append("Generals")
            lines.append(" " + " ".join(general))
    lines.append("End")
    return "\n".join(lines) + "\n"
