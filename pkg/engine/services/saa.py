"""
Sample average approximation of joint chance constraints
One binary per scenario deactivates every row of that scenario; at most
floor(delta * n) scenarios may be dropped. Rows that only differ by their
right-hand side across scenarios are screened: the (k+1)-th tightest
requirement becomes a deterministic row and big-M rows are kept only for
the scenarios tighter than it.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm

from models.errors import ModelBuildError
from models.schemas import AuditBlockReport, AuditReport
from services.uncertainty import ScenarioSet
from solvers.program import FEASIBILITY_TOL, MathProgram, Sense

logger = logging.getLogger(__name__)

TIE_TOL = 1e-12


@dataclass(frozen=True)
class ScenarioRow:
    """One linear row of one scenario, over variable names"""
    coeffs: Dict[str, float]
    sense: Sense
    rhs: float
    name: str = ""


@dataclass(frozen=True)
class RowFamily:
    """coeffs . x <= rhs[i] in scenario i (inf = no requirement)"""
    name: str
    coeffs: Dict[str, float]
    rhs: np.ndarray


@dataclass(frozen=True)
class UncertainRow:
    """coeffs . x + sum(loadings[column] * zeta[column]) <= rhs"""
    name: str
    coeffs: Dict[str, float]
    rhs: float
    loadings: Dict[str, float] = field(default_factory=dict)

    def family(self, scenarios: ScenarioSet) -> RowFamily:
        rhs = np.full(scenarios.n, self.rhs, dtype=float)
        for column, loading in self.loadings.items():
            rhs = rhs - loading * scenarios.draws[:, scenarios.columns.index(column)]
        return RowFamily(self.name, self.coeffs, rhs)

    def worst_case(self, supports: Mapping[str, Tuple[float, float]]) -> float:
        """Right-hand side that holds for every error inside the supports"""
        rhs = self.rhs
        for column, loading in self.loadings.items():
            lo, hi = supports[column]
            rhs -= max(loading * lo, loading * hi)
        return rhs


RowGenerator = Callable[[ScenarioSet], List[RowFamily]]


def uncertain_generator(rows: Sequence[UncertainRow]) -> RowGenerator:
    rows = list(rows)
    return lambda scenarios: [row.family(scenarios) for row in rows]


@dataclass
class JccBlock:
    name: str
    delta: float
    n: int
    budget: int
    families: List[RowFamily]
    indicators: Dict[int, str] = field(default_factory=dict)
    big_m: Dict[Tuple[str, int], float] = field(default_factory=dict)
    generator: Optional[RowGenerator] = None
    robust: bool = False

    def rows_for(self, scenarios: Optional[ScenarioSet]) -> List[RowFamily]:
        if scenarios is None:
            return self.families
        if self.generator is None:
            raise ValueError(f"JCC block {self.name} cannot rebuild rows for new scenarios")
        return self.generator(scenarios)


def _normalized(row: ScenarioRow) -> Tuple[Dict[str, float], float]:
    if row.sense == Sense.LE:
        return dict(row.coeffs), row.rhs
    if row.sense == Sense.GE:
        return {k: -a for k, a in row.coeffs.items()}, -row.rhs
    raise ModelBuildError(f"equality row {row.name!r} cannot be part of a chance constraint")


def families_from_rows(scenario_rows: Sequence[Sequence[ScenarioRow]]) -> List[RowFamily]:
    """Group per-scenario rows by (name, coefficients); missing rows impose nothing"""
    n = len(scenario_rows)
    order: List[Tuple] = []
    found: Dict[Tuple, Tuple[str, Dict[str, float], np.ndarray]] = {}
    for i, rows in enumerate(scenario_rows):
        for row in rows:
            coeffs, rhs = _normalized(row)
            key = (row.name, tuple(sorted((k, a) for k, a in coeffs.items() if a)))
            if key not in found:
                found[key] = (row.name, coeffs, np.full(n, math.inf))
                order.append(key)
            bucket = found[key][2]
            bucket[i] = min(bucket[i], rhs)
    return [RowFamily(found[k][0] or f"row{j}", found[k][1], found[k][2]) for j, k in enumerate(order)]


def _box_max(coeffs: Mapping[str, float], bounds: Mapping[str, Tuple[float, float]], where: str) -> float:
    total = 0.0
    for name, a in coeffs.items():
        if not a:
            continue
        lb, ub = bounds[name]
        end = ub if a > 0 else lb
        if math.isinf(end):
            raise ModelBuildError(f"{where}: variable {name} is unbounded, big-M is undefined")
        total += a * end
    return total


def compute_big_m(row: ScenarioRow, bounds: Mapping[str, Tuple[float, float]]) -> float:
    """Tightest constant that makes the row hold everywhere in the variable box"""
    coeffs, rhs = _normalized(row)
    return max(0.0, _box_max(coeffs, bounds, row.name or "row") - rhs)


def program_bounds(program: MathProgram, names) -> Dict[str, Tuple[float, float]]:
    out = {}
    for name in names:
        var = program.variables[program.index(name)]
        out[name] = (var.lb, var.ub)
    return out


def attach_families(
    program: MathProgram,
    families: List[RowFamily],
    n: int,
    delta: float,
    name: str,
    generator: Optional[RowGenerator] = None,
) -> JccBlock:
    """Add the screened SAA rows of one joint chance constraint"""
    if not 0.0 <= delta < 0.5:
        raise ModelBuildError(f"{name}: significance level {delta} outside [0, 0.5)")
    budget = int(math.floor(delta * n + 1e-12))
    block = JccBlock(name=name, delta=delta, n=n, budget=budget, families=families, generator=generator)

    def indicator(i: int) -> int:
        if i not in block.indicators:
            block.indicators[i] = f"{name}.s{i}"
            program.add_binary(block.indicators[i])
        return program.index(block.indicators[i])

    for family in families:
        if len(family.rhs) != n:
            raise ModelBuildError(f"{name}: family {family.name} has {len(family.rhs)} scenarios, expected {n}")
        columns = {program.index(v): a for v, a in family.coeffs.items() if a}
        ordered = np.sort(family.rhs)
        threshold = float(ordered[budget]) if budget < n else math.inf
        try:
            top = _box_max(family.coeffs, program_bounds(program, family.coeffs), family.name)
        except ModelBuildError:
            top = math.inf
        # the (k+1)-th tightest requirement holds whichever k scenarios are dropped
        if math.isfinite(threshold) and top > threshold:
            program.add_row(columns, Sense.LE, threshold, f"{name}.{family.name}")
        tight = [
            i for i in range(n)
            if math.isfinite(family.rhs[i]) and family.rhs[i] < threshold - TIE_TOL
        ]
        for i in tight:
            r = float(family.rhs[i])
            if math.isinf(top):
                raise ModelBuildError(f"{name}: row {family.name} has an unbounded variable, big-M is undefined")
            box = top - r
            if box <= TIE_TOL:
                continue
            big_m = min(box, threshold - r) if math.isfinite(threshold) else box
            s = indicator(i)
            coeffs = dict(columns)
            coeffs[s] = coeffs.get(s, 0.0) - big_m
            program.add_row(coeffs, Sense.LE, r, f"{name}.{family.name}.{i}")
            block.big_m[(family.name, i)] = big_m

    if block.indicators:
        program.add_row({program.index(v): 1.0 for v in block.indicators.values()}, Sense.LE, budget, f"{name}.budget")
    logger.debug(
        f"JCC {name}: {len(families)} row families, {len(block.indicators)} indicators, budget {budget}/{n}"
    )
    return block


def attach_jcc(
    program: MathProgram,
    scenario_rows: Sequence[Sequence[ScenarioRow]],
    delta: float,
    name: str = "jcc",
) -> JccBlock:
    """Joint chance constraint from explicit per-scenario rows"""
    families = families_from_rows(scenario_rows)
    return attach_families(program, families, len(scenario_rows), delta, name)


def attach_robust(
    program: MathProgram,
    rows: Sequence[UncertainRow],
    supports: Mapping[str, Tuple[float, float]],
    n: int,
    name: str,
) -> JccBlock:
    """delta = 0: every row at its worst case over the error supports"""
    for row in rows:
        columns = {program.index(v): a for v, a in row.coeffs.items() if a}
        program.add_row(columns, Sense.LE, row.worst_case(supports), f"{name}.{row.name}")
    return JccBlock(
        name=name, delta=0.0, n=n, budget=0, families=[],
        generator=uncertain_generator(rows), robust=True,
    )


def violation_rate(
    values: Mapping[str, float],
    block: JccBlock,
    scenarios: Optional[ScenarioSet] = None,
    tol: float = FEASIBILITY_TOL,
) -> float:
    """Fraction of scenarios in which any row of the block is violated"""
    families = block.rows_for(scenarios)
    n = scenarios.n if scenarios is not None else block.n
    if n == 0:
        return 0.0
    violated = np.zeros(n, dtype=bool)
    for family in families:
        lhs = sum(a * values[v] for v, a in family.coeffs.items())
        violated |= lhs > family.rhs + tol
    return float(np.mean(violated))


def wilson_interval(rate: float, n: int, confidence: float = 0.95) -> Tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    z = float(norm.ppf(0.5 + confidence / 2.0))
    denom = 1.0 + z * z / n
    center = (rate + z * z / (2 * n)) / denom
    half = z * math.sqrt(rate * (1 - rate) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


def audit_report(
    blocks: Sequence[JccBlock],
    values: Mapping[str, float],
    training: Optional[ScenarioSet],
    fresh: ScenarioSet,
) -> AuditReport:
    """Training and out-of-sample violation rates per block"""
    reports = []
    for block in blocks:
        training_rate = violation_rate(values, block, training)
        fresh_rate = violation_rate(values, block, fresh)
        low, high = wilson_interval(fresh_rate, fresh.n)
        reports.append(AuditBlockReport(
            name=block.name,
            delta=block.delta,
            budget=block.budget,
            robust=block.robust,
            training_scenarios=training.n if training is not None else block.n,
            training_rate=training_rate,
            fresh_scenarios=fresh.n,
            fresh_rate=fresh_rate,
            interval_low=low,
            interval_high=high,
            indicators_used=sum(1 for v in block.indicators.values() if values.get(v, 0.0) > 0.5),
        ))
    worst = max((r.fresh_rate - r.delta for r in reports), default=0.0)
    logger.info(f"✅ Audited {len(reports)} chance constraints on {fresh.n} fresh scenarios (worst excess {worst:.3f})")
    return AuditReport(blocks=reports)
