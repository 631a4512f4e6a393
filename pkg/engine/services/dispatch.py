"""
Run modes
Centralized CFC-SED, distributed CFC-SED through the coordinator, and the
independent (IFC) baselines, each ending in a DispatchResult.
"""
import asyncio
import hashlib
import logging
from typing import Dict, Mapping, Optional, Sequence, Tuple

from models.case import ItdCase
from models.errors import SolverError
from models.schemas import AuditReport, DispatchResult, RunMode
from services.case_loader import serialize_case
from services.coordinator import AdmmConfig, Agent, Coordinator
from services.frequency import PwlMarginFit
from services.results import assemble_dispatch, extract_dispatch, solution_values
from services.saa import JccBlock, audit_report
from services.sed_builder import ModelArtifacts, build_centralized, build_ifc_variants, prepare_artifacts
from services.uncertainty import fresh_seed, sample
from solvers.backend import solve

logger = logging.getLogger(__name__)


def case_digest(case: ItdCase) -> str:
    return hashlib.sha256(serialize_case(case)).hexdigest()


def build_artifacts(
    case: ItdCase,
    scenarios: int,
    seed: int,
    margin: Optional[PwlMarginFit] = None,
    warm: bool = False,
) -> ModelArtifacts:
    drawn = sample(case.uncertainty, scenarios, seed, case.horizon)
    return prepare_artifacts(case, drawn, margin=margin, warm=warm)


def optimal_error_pct(objective: float, reference: float) -> float:
    return 100.0 * abs(objective - reference) / max(abs(reference), 1e-9)


def audit_values(
    artifacts: ModelArtifacts,
    blocks: Sequence[JccBlock],
    values: Mapping[str, float],
    fresh_scenarios: int,
) -> AuditReport:
    """Chance-constraint rates on the training set and on a disjoint fresh sample"""
    case = artifacts.case
    seed = artifacts.scenarios.seed if artifacts.scenarios.seed is not None else 0
    fresh = sample(case.uncertainty, fresh_scenarios, fresh_seed(seed), case.horizon)
    return audit_report(blocks, values, artifacts.scenarios, fresh)


def solve_centralized(
    artifacts: ModelArtifacts,
    backend: Optional[str] = None,
    case_hash: str = "",
    audit: Optional[int] = None,
) -> DispatchResult:
    """Reference CFC-SED: every region and the coupling rows in one MILP"""
    region = build_centralized(artifacts)
    solution = solve(region.program, backend)
    if not solution.optimal:
        raise SolverError(f"centralized CFC-SED: {solution.status.value}")
    result = extract_dispatch(artifacts.case, [(region, solution)], artifacts.layout, RunMode.CENTRALIZED,
                              case_hash=case_hash)
    if audit:
        report = audit_values(artifacts, region.blocks, solution_values(region, solution), audit)
        result = result.model_copy(update={"audit": report})
    logger.info(f"✅ Centralized CFC-SED solved: objective {result.objective:.6f} k$")
    return result


def solve_ifc(
    artifacts: ModelArtifacts,
    backend: Optional[str] = None,
    case_hash: str = "",
    pins: Optional[Mapping[int, Mapping[int, Tuple[float, float]]]] = None,
    audit: Optional[int] = None,
) -> DispatchResult:
    """Independent TPS and ADN dispatches with no boundary coordination"""
    variants = build_ifc_variants(artifacts, pins)
    regions = [variants["ifc_tps"]] + list(variants["ifc_adn"].values())
    parts = []
    for region in regions:
        solution = solve(region.program, backend)
        if not solution.optimal:
            raise SolverError(f"{region.program.name}: {solution.status.value}")
        parts.append((region, solution))
    result = extract_dispatch(artifacts.case, parts, artifacts.layout, RunMode.IFC, case_hash=case_hash)
    if audit:
        values: Dict[str, float] = {}
        blocks = []
        for region, solution in parts:
            values.update(solution_values(region, solution))
            blocks.extend(region.blocks)
        result = result.model_copy(update={"audit": audit_values(artifacts, blocks, values, audit)})
    logger.info(f"✅ IFC-SED solved: objective {result.objective:.6f} k$")
    return result


async def solve_distributed(
    artifacts: ModelArtifacts,
    agents: Sequence[Agent],
    config: Optional[AdmmConfig] = None,
    outer_max: Optional[int] = None,
    case_hash: str = "",
    audit: Optional[int] = None,
) -> DispatchResult:
    """Tractable ADMM iteration over already constructed agents"""
    await asyncio.gather(*(agent.start() for agent in agents))
    outcome = await Coordinator(agents, config).run_tractable(outer_max)
    result = assemble_dispatch(
        artifacts.case, outcome.reports, artifacts.layout, RunMode.DISTRIBUTED,
        consensus=outcome.state.ybar, case_hash=case_hash,
    )
    update = {
        "converged": outcome.converged,
        "outer_iterations": outcome.outer_iterations,
        "admm_iterations": outcome.admm_iterations,
        "history": outcome.history,
    }
    if audit:
        values: Dict[str, float] = {}
        for report in outcome.reports:
            values.update(report.values)
        blocks = build_centralized(artifacts).blocks
        update["audit"] = audit_values(artifacts, blocks, values, audit)
    result = result.model_copy(update=update)
    status = "✅" if outcome.converged else "⚠️"
    logger.info(
        f"{status} Distributed CFC-SED: objective {result.objective:.6f} k$ after "
        f"{outcome.outer_iterations} outer / {outcome.admm_iterations} ADMM iterations"
    )
    return result
