"""
Command handlers
One function per CLI subcommand; each returns the process exit code.
"""
import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd

from api.agents import RemoteAgent, local_agents, loopback, make_agent, serve_tcp
from api.transport import connect
from config import get_settings
from models.case import Diagnostic, ItdCase
from models.errors import CaseValidationError
from models.schemas import CompareRow, DispatchResult, RunManifest, RunMode
from services.case_loader import load_case
from services.coordinator import AdmmConfig, export_history_csv
from services.dispatch import (
    build_artifacts,
    case_digest,
    optimal_error_pct,
    solve_centralized,
    solve_distributed,
    solve_ifc,
)
from services.frequency import aggregate_dispatch, export_trace_csv, fit_case_margin, simulate_sfr
from services.powerflow import export_matrix_csv
from services.results import export_result_json, load_result, write_atomic
from services.sed_builder import build_adn_fcsed, build_centralized, build_ifc_variants, build_tps_fcsed
from services.sweep import export_sweep_csv, run_sweep
from services.uncertainty import export_scenarios_csv, fresh_seed, sample
from services.verification import (
    DEFAULT_PRESET_FRACTION,
    allocation_shares,
    boundary_response,
    export_verify_csv,
    frequency_report,
    preset_disturbance,
    verify_dispatch,
)
from solvers.program import export_lp

logger = logging.getLogger(__name__)

SENSITIVITY_MATRICES = ("a_p", "a_q", "b_p", "b_q", "f_p", "f_q")


def _scenario_count(args: argparse.Namespace) -> int:
    settings = get_settings()
    if getattr(args, "scenarios", None):
        return args.scenarios
    return settings.full_scenarios if getattr(args, "full_defaults", False) else settings.scenarios


def _seed(args: argparse.Namespace) -> int:
    return args.seed if getattr(args, "seed", None) is not None else get_settings().seed


def _dump_dir(args: argparse.Namespace) -> Optional[Path]:
    directory = getattr(args, "debug_dump", None) or get_settings().debug_dump
    return Path(directory) if directory else None


def dump_artifacts(artifacts, directory: Path):
    """Sensitivity matrices of every region as CSV"""
    directory.mkdir(parents=True, exist_ok=True)
    for region, bundle in artifacts.sensitivities.items():
        for name in SENSITIVITY_MATRICES:
            export_matrix_csv(bundle, name, directory / f"{region}-{name}.csv")


def unconverged_path(out: Path) -> Path:
    """results.json -> results.unconverged.json"""
    return out.with_name(f"{out.stem}.unconverged{out.suffix or '.json'}")


def _checked_pair(case_path: str, result_path: str, allow_unconverged: bool = False):
    case = load_case(case_path)
    result = load_result(result_path)
    digest = case_digest(case)
    if result.case_hash and result.case_hash != digest:
        raise CaseValidationError([Diagnostic(
            entity=str(result_path),
            invariant="case-hash",
            message=f"dispatch was computed for case {result.case_hash[:12]}, not {digest[:12]}",
        )])
    if not result.converged and not allow_unconverged:
        raise CaseValidationError([Diagnostic(
            entity=str(result_path),
            invariant="converged",
            message="dispatch comes from an unconverged ADMM run (pass --allow-unconverged to use it)",
        )])
    return case, result


async def _distributed(args, artifacts, config: AdmmConfig, case_hash: str) -> DispatchResult:
    tasks: List[asyncio.Task] = []
    if args.agents:
        agents = [RemoteAgent(await connect(address), address) for address in args.agents.split(",")]
    else:
        agents = local_agents(artifacts, args.backend, _dump_dir(args))
        if args.transport == "queue":
            agents, tasks = loopback(agents)
    try:
        return await solve_distributed(
            artifacts, agents, config, outer_max=args.outer_max, case_hash=case_hash, audit=args.audit,
        )
    finally:
        for task in tasks:
            if not task.done():
                task.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)


def cmd_solve(args: argparse.Namespace) -> int:
    case = load_case(args.case)
    digest = case_digest(case)
    n, seed = _scenario_count(args), _seed(args)
    mode = RunMode(args.mode)
    artifacts = build_artifacts(case, n, seed, warm=args.warm)
    dump_dir = _dump_dir(args)
    if dump_dir is not None:
        dump_artifacts(artifacts, dump_dir)
    logger.info(f"🔄 Solving {case.name} ({mode.value}, {n} scenarios, seed {seed})")

    config = AdmmConfig.from_settings(
        rho=args.admm_rho, epsilon=args.admm_epsilon, max_iters=args.admm_max_iters,
        accumulate=True if args.admm_accumulate else None,
    )
    if mode == RunMode.CENTRALIZED:
        result = solve_centralized(artifacts, args.backend, digest, audit=args.audit)
    elif mode == RunMode.IFC:
        result = solve_ifc(artifacts, args.backend, digest, audit=args.audit)
    else:
        result = asyncio.run(_distributed(args, artifacts, config, digest))
        if not args.no_reference:
            reference = solve_centralized(artifacts, args.backend, digest)
            error = optimal_error_pct(result.objective, reference.objective)
            result = result.model_copy(update={"optimal_error_pct": error})
            logger.info(f"Optimal error against the centralized solve: {error:.4f}%")

    result = result.model_copy(update={"manifest": RunManifest(
        command="solve",
        case_path=str(args.case),
        case_hash=digest,
        seed=seed,
        scenarios=n,
        mode=mode,
        backend=args.backend or get_settings().solver_backend,
        overrides={
            "admm": config.model_dump(),
            "outer_max": args.outer_max or get_settings().outer_max_iters,
            "audit": args.audit,
            "warm": args.warm,
        },
    )})
    out = Path(args.out)
    if not result.converged:
        out = unconverged_path(out)
        logger.warning(f"⚠️ ADMM did not converge, writing the last iterate to {out}")
    export_result_json(result, out)
    if result.history and args.history:
        export_history_csv(result.history, Path(args.history))
    print(f"{mode.value}: objective {result.objective:.6f} k$", end="")
    if result.optimal_error_pct is not None:
        print(f", optimal_error_pct {result.optimal_error_pct:.4f}", end="")
    print()
    return 0 if result.converged else 2


def cmd_verify(args: argparse.Namespace) -> int:
    case, result = _checked_pair(args.case, args.result, args.allow_unconverged)
    seed = result.manifest.seed if result.manifest is not None else _seed(args)
    scenarios = sample(case.uncertainty, args.mc, fresh_seed(seed), case.horizon)
    report, table = verify_dispatch(case, result, scenarios, ac=args.ac)
    if args.out:
        write_atomic(Path(args.out), report.model_dump_json(indent=2))
    if args.csv:
        export_verify_csv(table, Path(args.csv))
    print(
        f"voltage violations {report.voltage_violations}/{report.scenarios} "
        f"(v in [{report.v_min:.4f}, {report.v_max:.4f}]), line {report.line_violation_rate:.3f}, "
        f"IBR {report.ibr_violation_rate:.3f}, boundary {report.boundary_violations}, "
        f"SFR shortfall {report.sfr_violation_rate:.3f}"
    )
    return 0


def _preset_fraction(args: argparse.Namespace) -> Optional[float]:
    """None selects the worst-case disturbance bounds"""
    return None if getattr(args, "preset_bounds", False) else args.preset_fraction


def _disturbance(case: ItdCase, args: argparse.Namespace) -> float:
    if args.disturbance is not None:
        return args.disturbance
    if args.case_id is None:
        raise ValueError("give --disturbance or --case-id")
    return preset_disturbance(case, args.case_id, args.period, _preset_fraction(args))


def cmd_simulate_freq(args: argparse.Namespace) -> int:
    case, result = _checked_pair(args.case, args.result, args.allow_unconverged)
    disturbance = _disturbance(case, args)
    report = frequency_report(case, result, disturbance, args.period, fit_case_margin(case))
    if args.trace:
        period = result.period(args.period)
        params = aggregate_dispatch(case, period.ibr_h_total, period.ibr_d_total)
        export_trace_csv(simulate_sfr(params, disturbance), Path(args.trace))
    if args.boundary:
        table = boundary_response(case, result, fraction=_preset_fraction(args))
        write_atomic(Path(args.boundary), table.to_csv(index=False))
    marks = {k: "PASS" if ok else "FAIL" for k, ok in report.passed.items()}
    print(
        f"disturbance {disturbance:.4f} p.u.: RoCoF {report.rocof:.4f} Hz/s [{marks['rocof']}], "
        f"nadir {report.nadir:.4f} Hz [{marks['nadir']}], qss {report.qss:.4f} Hz [{marks['qss']}]"
    )
    return 0


def compare_results(
    results: Dict[str, DispatchResult],
    case: Optional[ItdCase] = None,
    case_id: Optional[int] = None,
    fraction: Optional[float] = DEFAULT_PRESET_FRACTION,
) -> pd.DataFrame:
    """Side-by-side table; optimal error against the first centralized result (or the first)"""
    if not results:
        raise ValueError("nothing to compare")
    reference = next((r for r in results.values() if r.mode == RunMode.CENTRALIZED), next(iter(results.values())))
    rows = []
    for label, result in results.items():
        shares = allocation_shares(result)
        row = CompareRow(
            label=label,
            mode=result.mode,
            objective=result.objective,
            optimal_error_pct=optimal_error_pct(result.objective, reference.objective),
            outer_iterations=result.outer_iterations,
            admm_iterations=result.admm_iterations,
            adn_share_h=shares["h"],
            adn_share_d=shares["d"],
            adn_share_r_up=shares["r_up"],
            adn_share_r_dn=shares["r_dn"],
        )
        if case is not None and case_id is not None:
            freq = frequency_report(case, result, preset_disturbance(case, case_id, fraction=fraction))
            row = row.model_copy(update={"rocof": freq.rocof, "nadir": freq.nadir, "qss": freq.qss})
        rows.append(row.model_dump(mode="json"))
    frame = pd.DataFrame(rows)
    frame["objective_delta"] = frame["objective"] - reference.objective
    return frame


def cmd_compare(args: argparse.Namespace) -> int:
    results = {Path(p).stem: load_result(p) for p in args.results}
    hashes = {r.case_hash for r in results.values() if r.case_hash}
    if len(hashes) > 1:
        raise CaseValidationError([Diagnostic(
            entity="compare", invariant="case-hash", message="results were computed for different cases",
        )])
    case = load_case(args.case) if args.case else None
    frame = compare_results(results, case, args.case_id, _preset_fraction(args))
    if args.csv:
        write_atomic(Path(args.csv), frame.to_csv(index=False))
    print(frame.to_string(index=False))
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cases = {Path(p).stem: load_case(p) for p in args.case}
    counts = [int(c) for c in args.counts.split(",") if c.strip()]
    config = AdmmConfig.from_settings(
        rho=args.admm_rho, epsilon=args.admm_epsilon, max_iters=args.admm_max_iters,
        accumulate=True if args.admm_accumulate else None,
    )
    frame = asyncio.run(run_sweep(
        cases, counts, _seed(args), lambda artifacts: local_agents(artifacts, args.backend),
        config, outer_max=args.outer_max, backend=args.backend,
    ))
    if args.csv:
        export_sweep_csv(frame, Path(args.csv))
    print(frame.to_string(index=False))
    return 0 if frame["converged"].all() else 2


def cmd_serve_agent(args: argparse.Namespace) -> int:
    case = load_case(args.case)
    artifacts = build_artifacts(case, _scenario_count(args), _seed(args), warm=args.warm)
    agent = make_agent(artifacts, args.role, args.adn_id, args.backend)
    clean = asyncio.run(serve_tcp(agent, args.listen, args.idle_timeout))
    return 0 if clean else 2


def cmd_sample(args: argparse.Namespace) -> int:
    case = load_case(args.case)
    seed = _seed(args)
    scenarios = sample(case.uncertainty, _scenario_count(args), fresh_seed(seed) if args.fresh else seed, case.horizon)
    export_scenarios_csv(scenarios, Path(args.out))
    return 0


def cmd_fit_margin(args: argparse.Namespace) -> int:
    case = load_case(args.case)
    fit = fit_case_margin(case, args.segments, args.grid)
    for m, (c, bh, bd) in enumerate(fit.segments):
        print(f"plane {m + 1}: {fit.nadir_limit:.4f} * ({c:+.6f} {bh:+.6f} H {bd:+.6f} D)")
    print(f"H box {fit.h_box}, D box {fit.d_box}")
    if args.out:
        write_atomic(Path(args.out), fit.model_dump_json(indent=2))
    return 0


def cmd_export_lp(args: argparse.Namespace) -> int:
    case = load_case(args.case)
    artifacts = build_artifacts(case, _scenario_count(args), _seed(args), warm=args.warm)
    out = Path(args.out)
    programs = [build_tps_fcsed(artifacts).program]
    programs += [build_adn_fcsed(artifacts, b).program for b in case.adn_ids]
    programs.append(build_centralized(artifacts).program)
    variants = build_ifc_variants(artifacts)
    programs.append(variants["ifc_tps"].program)
    programs += [r.program for r in variants["ifc_adn"].values()]
    for program in programs:
        write_atomic(out / f"{program.name}.lp", export_lp(program))
    print(f"wrote {len(programs)} LP files to {out}")
    return 0


def diagnostics_to_stderr(error: Exception):
    diagnostics = getattr(error, "diagnostics", None)
    if diagnostics:
        for d in diagnostics:
            print(f"  {d}", file=sys.stderr)
