"""
Dispatch extraction and results files
"""
import logging
import os
import tempfile
from datetime import datetime
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple

from models.case import ItdCase, region_name
from models.errors import SolverError
from models.schemas import (
    BoundaryDispatch,
    DispatchResult,
    PeriodDispatch,
    RegionReport,
    RunMode,
    UnitDispatch,
)
from services.sed_builder import ConsensusLayout, RegionProgram, ifc_boundary, var_name
from solvers.program import Solution

logger = logging.getLogger(__name__)


def solution_values(region: RegionProgram, solution: Solution) -> Dict[str, float]:
    if not solution.optimal:
        raise SolverError(f"{region.program.name}: no optimal solution ({solution.status.value})")
    return {v.name: float(x) for v, x in zip(region.program.variables, solution.values)}


def solved_cost_groups(region: RegionProgram, solution: Solution) -> Dict[str, float]:
    return region.program.group_values(solution.values)


def indicator_assignment(blocks, values: Mapping[str, float]) -> Dict[str, list]:
    """Scenario indices dropped per JCC block"""
    return {
        block.name: sorted(i for i, name in block.indicators.items() if values.get(name, 0.0) > 0.5)
        for block in blocks
    }


def _unit_records(case: ItdCase, region: str, values: Mapping[str, float], t: int):
    data = case.regions[region]

    def get(unit: str, kind: str) -> float:
        return values.get(var_name(region, unit, kind, t), 0.0)

    records = []
    for g in data.thermal:
        records.append(UnitDispatch(
            region=region, unit=g.id, kind="thermal",
            p=get(g.id, "p"), q=get(g.id, "q"), r_up=get(g.id, "ru"), r_dn=get(g.id, "rd"),
        ))
    for w in data.renewables:
        records.append(UnitDispatch(
            region=region, unit=w.id, kind=w.kind.value,
            p=get(w.id, "p"), q=get(w.id, "q"), h=get(w.id, "h"), d=get(w.id, "d"),
            curtailment=get(w.id, "spill"),
        ))
    for e in data.storage:
        pc, pd = get(e.id, "pc"), get(e.id, "pd")
        records.append(UnitDispatch(
            region=region, unit=e.id, kind="storage",
            p=pd - pc, p_charge=pc, p_discharge=pd, energy=get(e.id, "e"),
            r_up=get(e.id, "ru"), r_dn=get(e.id, "rd"), h=get(e.id, "h"), d=get(e.id, "d"),
        ))
    for c in data.compensators:
        records.append(UnitDispatch(region=region, unit=c.id, kind="compensator", q=get(c.id, "q")))
    return records


def _prefixed(prefix: str, source: Mapping[str, object]) -> Dict[str, object]:
    return {k: v for k, v in source.items() if k.startswith(prefix)}


def report_from_values(
    case: ItdCase,
    region: str,
    values: Mapping[str, float],
    groups: Mapping[str, float],
    indicators: Mapping[str, list],
    layout: ConsensusLayout,
) -> RegionReport:
    """Unit records, cost groups, boundary copy and dropped scenarios of one region"""
    prefix = f"{region}."
    if region == "tps":
        entries = layout.entries()
        name = layout.tps_name
    else:
        entries = layout.entries(int(region[len("adn"):]))
        name = layout.adn_name
    boundary = {
        layout.key(b, f, t): values[name(b, f, t)]
        for b, f, t in entries if name(b, f, t) in values
    }
    return RegionReport(
        region=region,
        periods=[_unit_records(case, region, values, t) for t in range(case.horizon)],
        cost_groups=_prefixed(prefix, groups),
        boundary=boundary,
        indicators=_prefixed(prefix, indicators),
        values=_prefixed(prefix, values),
    )


def region_report(case: ItdCase, region: RegionProgram, solution: Solution, layout: ConsensusLayout) -> RegionReport:
    values = solution_values(region, solution)
    return report_from_values(
        case, region.region, values, solved_cost_groups(region, solution),
        indicator_assignment(region.blocks, values), layout,
    )


def assemble_dispatch(
    case: ItdCase,
    reports: Sequence[RegionReport],
    layout: ConsensusLayout,
    mode: RunMode,
    consensus: Optional[Mapping[str, float]] = None,
    case_hash: str = "",
) -> DispatchResult:
    """Typed dispatch from the reports of every region"""
    by_region = {r.region: r for r in reports}
    missing = set(case.regions) - set(by_region)
    if missing:
        raise SolverError(f"no report from regions {sorted(missing)}")
    tps = by_region["tps"]
    coordinated = mode != RunMode.IFC
    fixed = {b: ifc_boundary(case, b) for b in case.adn_ids} if not coordinated else {}

    groups: Dict[str, float] = {}
    indicators: Dict[str, list] = {}
    for region in case.regions:
        groups.update(by_region[region].cost_groups)
        indicators.update(by_region[region].indicators)
    for group in _expected_groups(case):
        groups.setdefault(group, 0.0)

    periods = []
    for t in range(case.horizon):
        units = [u for region in case.regions for u in by_region[region].periods[t]]
        boundaries = []
        for b in case.adn_ids:
            adn_report = by_region[region_name(b)]
            z = {f: tps.boundary[layout.key(b, f, t)] for f in layout.fields if layout.key(b, f, t) in tps.boundary}
            y = {f: adn_report.boundary[layout.key(b, f, t)]
                 for f in layout.fields if layout.key(b, f, t) in adn_report.boundary}
            p_tps, q_tps = (z.get("p", 0.0), z.get("q", 0.0)) if coordinated else fixed[b][t]
            boundaries.append(BoundaryDispatch(
                adn_id=b, p_tps=p_tps, q_tps=q_tps, p_adn=y.get("p"), q_adn=y.get("q"),
                consensus_tps=z, consensus_adn=y,
            ))
        thermal = [u for u in units if u.kind == "thermal"]
        periods.append(PeriodDispatch(
            period=t,
            units=units,
            boundaries=boundaries,
            ibr_h_total=sum(u.h for u in units),
            ibr_d_total=sum(u.d for u in units),
            thermal_r_up=sum(u.r_up for u in thermal),
            thermal_r_dn=sum(u.r_dn for u in thermal),
        ))

    if consensus is None:
        consensus = tps.boundary if coordinated else {}
    return DispatchResult(
        mode=mode,
        case_name=case.name,
        case_hash=case_hash,
        base_mva=case.base_mva,
        objective=sum(groups.values()),
        cost_groups=dict(sorted(groups.items())),
        periods=periods,
        consensus=dict(consensus),
        indicators=indicators,
    )


def extract_dispatch(
    case: ItdCase,
    parts: Sequence[Tuple[RegionProgram, Solution]],
    layout: ConsensusLayout,
    mode: RunMode,
    consensus: Optional[Mapping[str, float]] = None,
    case_hash: str = "",
) -> DispatchResult:
    """Typed dispatch from solved regional (or centralized) programs"""
    values: Dict[str, float] = {}
    groups: Dict[str, float] = {}
    indicators: Dict[str, list] = {}
    for region, solution in parts:
        solved = solution_values(region, solution)
        values.update(solved)
        groups.update(solved_cost_groups(region, solution))
        indicators.update(indicator_assignment(region.blocks, solved))
    reports = [
        report_from_values(case, region, values, groups, indicators, layout)
        for region in case.regions
    ]
    return assemble_dispatch(case, reports, layout, mode, consensus, case_hash)


def _expected_groups(case: ItdCase):
    groups = ["tps.G", "tps.W", "tps.E"]
    for b in case.adn_ids:
        region = region_name(b)
        groups += [f"{region}.G", f"{region}.PV", f"{region}.E"]
    return groups


def write_atomic(path: Path, text: str) -> Path:
    """Write through a temporary file in the same directory, then rename"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(handle, "w", encoding="utf-8") as out:
            out.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def export_result_json(result: DispatchResult, path: Path) -> Path:
    if result.generated_at is None:
        result = result.model_copy(update={"generated_at": datetime.utcnow()})
    write_atomic(path, result.model_dump_json(indent=2))
    logger.info(f"✅ Wrote {result.mode.value} dispatch (objective {result.objective:.6f} k$) to {path}")
    return Path(path)


def load_result(path: Path) -> DispatchResult:
    return DispatchResult.model_validate_json(Path(path).read_text(encoding="utf-8"))
