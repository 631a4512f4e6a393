"""
Timing sweep over cases and scenario counts
Every cell builds the artifacts once, solves the centralized reference and
the distributed dispatch, and records the objective gap, iteration counts and
wall times.
"""
import logging
import time
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import pandas as pd

from models.case import ItdCase
from models.schemas import SweepRow
from services.coordinator import AdmmConfig, Agent
from services.dispatch import build_artifacts, optimal_error_pct, solve_centralized, solve_distributed
from services.sed_builder import ModelArtifacts, build_centralized

logger = logging.getLogger(__name__)

AgentFactory = Callable[[ModelArtifacts], Sequence[Agent]]


def case_buses(case: ItdCase) -> int:
    return sum(len(region.network.buses) for region in case.regions.values())


async def sweep_cell(
    label: str,
    case: ItdCase,
    scenarios: int,
    seed: int,
    agents: AgentFactory,
    config: Optional[AdmmConfig] = None,
    outer_max: Optional[int] = None,
    backend: Optional[str] = None,
) -> SweepRow:
    started = time.perf_counter()
    artifacts = build_artifacts(case, scenarios, seed)
    binaries = len(build_centralized(artifacts).program.integers)
    built = time.perf_counter()

    reference = solve_centralized(artifacts, backend)
    solved = time.perf_counter()

    result = await solve_distributed(artifacts, agents(artifacts), config, outer_max=outer_max)
    finished = time.perf_counter()

    row = SweepRow(
        case=label,
        buses=case_buses(case),
        binaries=binaries,
        scenarios=scenarios,
        centralized_objective=reference.objective,
        distributed_objective=result.objective,
        optimal_error_pct=optimal_error_pct(result.objective, reference.objective),
        outer_iterations=result.outer_iterations,
        admm_iterations=result.admm_iterations,
        converged=result.converged,
        build_seconds=built - started,
        centralized_seconds=solved - built,
        distributed_seconds=finished - solved,
    )
    status = "✅" if row.converged else "⚠️"
    logger.info(
        f"{status} {label} with {scenarios} scenarios: error {row.optimal_error_pct:.4f}%, "
        f"{row.outer_iterations} outer / {row.admm_iterations} ADMM iterations, "
        f"{row.distributed_seconds:.2f} s distributed vs {row.centralized_seconds:.2f} s centralized"
    )
    return row


async def run_sweep(
    cases: Mapping[str, ItdCase],
    counts: Sequence[int],
    seed: int,
    agents: AgentFactory,
    config: Optional[AdmmConfig] = None,
    outer_max: Optional[int] = None,
    backend: Optional[str] = None,
) -> pd.DataFrame:
    """One row per (case, scenario count), cases in the given order"""
    if not cases or not counts:
        raise ValueError("the sweep needs at least one case and one scenario count")
    rows = []
    for label, case in cases.items():
        for n in counts:
            row = await sweep_cell(label, case, n, seed, agents, config, outer_max, backend)
            rows.append(row.model_dump())
    return pd.DataFrame(rows, columns=list(SweepRow.model_fields))


def export_sweep_csv(frame: pd.DataFrame, path: Path) -> Path:
    frame.to_csv(path, index=False)
    logger.info(f"✅ Wrote timing sweep ({len(frame)} rows) to {path}")
    return Path(path)
