"""
CFC-SED engine
Command-line entry point: solve, verify, simulate-freq, compare, sweep,
serve-agent, sample, fit-margin, export-lp.
"""
import argparse
import logging
import sys
from typing import List, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

load_dotenv()

from api import commands  # noqa: E402
from config import configure_logging  # noqa: E402
from models.errors import (  # noqa: E402
    AgentAbort,
    CaseParseError,
    CaseValidationError,
    ConvergenceError,
    EngineError,
    ModelBuildError,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_RUNTIME = 2


def _case(parser: argparse.ArgumentParser):
    parser.add_argument("--case", required=True, help="ITD case JSON")


def _presets(parser: argparse.ArgumentParser):
    parser.add_argument("--preset-fraction", type=float, default=commands.DEFAULT_PRESET_FRACTION,
                        help="sign presets use +-fraction of regional net load (default 0.3)")
    parser.add_argument("--preset-bounds", action="store_true",
                        help="sign presets use the worst-case disturbance bounds instead")


def _admm(parser: argparse.ArgumentParser):
    parser.add_argument("--admm-rho", type=float)
    parser.add_argument("--admm-epsilon", type=float)
    parser.add_argument("--admm-max-iters", type=int)
    parser.add_argument("--admm-accumulate", action="store_true", help="accumulate multipliers across iterations")
    parser.add_argument("--outer-max", type=int, help="cap on indicator iterations")


def _sampling(parser: argparse.ArgumentParser):
    parser.add_argument("--scenarios", type=int, help="training scenarios (default from settings)")
    parser.add_argument("--full-defaults", action="store_true", help="use the larger scenario default")
    parser.add_argument("--seed", type=int, help="scenario seed")
    parser.add_argument("--backend", choices=["auto", "builtin", "highs"], help="solver backend")
    parser.add_argument("--warm", "--warm-linearization", dest="warm", action="store_true",
                        help="linearize around the forecast AC operating point")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfcsed", description="Frequency-constrained ITD economic dispatch")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING (default CFCSED_LOG)")
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="dispatch a case")
    _case(solve)
    _sampling(solve)
    solve.add_argument("--mode", choices=["centralized", "distributed", "ifc"], default="centralized")
    solve.add_argument("--out", default="results.json")
    solve.add_argument("--history", default="history.csv", help="ADMM history CSV (distributed mode)")
    solve.add_argument("--audit", type=int, help="fresh scenarios for the chance-constraint audit")
    solve.add_argument("--agents", help="comma-separated host:port of running agents")
    solve.add_argument("--transport", choices=["inprocess", "queue"], default="inprocess")
    _admm(solve)
    solve.add_argument("--no-reference", action="store_true", help="skip the centralized reference solve")
    solve.add_argument("--debug-dump", help="directory for per-round LP files and sensitivity matrices")
    solve.set_defaults(handler=commands.cmd_solve)

    verify = sub.add_parser("verify", help="Monte-Carlo security check of a dispatch")
    _case(verify)
    verify.add_argument("--result", required=True)
    verify.add_argument("--mc", type=int, default=1000, help="fresh scenarios")
    verify.add_argument("--seed", type=int)
    verify.add_argument("--ac", action="store_true", help="also check voltages with the AC power flow")
    verify.add_argument("--out", help="report JSON")
    verify.add_argument("--csv", help="per-scenario voltage table")
    verify.add_argument("--allow-unconverged", action="store_true", help="accept a dispatch from a stalled ADMM run")
    verify.set_defaults(handler=commands.cmd_verify)

    simulate = sub.add_parser("simulate-freq", help="step response of a dispatch")
    _case(simulate)
    simulate.add_argument("--result", required=True)
    simulate.add_argument("--disturbance", type=float, help="step disturbance in p.u. (positive = load increase)")
    simulate.add_argument("--case-id", type=int, choices=[1, 2, 3, 4], help="sign preset")
    _presets(simulate)
    simulate.add_argument("--period", type=int, default=0)
    simulate.add_argument("--trace", help="trace CSV")
    simulate.add_argument("--boundary", help="CSV of base and post-regulation boundary power under presets 1..4")
    simulate.add_argument("--allow-unconverged", action="store_true", help="accept a dispatch from a stalled ADMM run")
    simulate.set_defaults(handler=commands.cmd_simulate_freq)

    compare = sub.add_parser("compare", help="side-by-side results")
    compare.add_argument("results", nargs="+")
    compare.add_argument("--case", help="case JSON, needed for frequency indices")
    compare.add_argument("--case-id", type=int, choices=[1, 2, 3, 4])
    _presets(compare)
    compare.add_argument("--csv")
    compare.set_defaults(handler=commands.cmd_compare)

    sweep = sub.add_parser("sweep", help="timing sweep over cases and scenario counts")
    sweep.add_argument("--case", action="append", required=True, help="ITD case JSON (repeatable)")
    sweep.add_argument("--counts", default="20,50,100", help="comma-separated scenario counts")
    sweep.add_argument("--seed", type=int)
    sweep.add_argument("--backend", choices=["auto", "builtin", "highs"])
    _admm(sweep)
    sweep.add_argument("--csv", help="sweep table CSV")
    sweep.set_defaults(handler=commands.cmd_sweep)

    serve = sub.add_parser("serve-agent", help="run one TSO or DSO agent")
    _case(serve)
    _sampling(serve)
    serve.add_argument("--role", choices=["tso", "dso"], required=True)
    serve.add_argument("--adn-id", type=int)
    serve.add_argument("--listen", default="127.0.0.1:7700")
    serve.add_argument("--idle-timeout", type=float, help="seconds without coordinator traffic before exiting")
    serve.set_defaults(handler=commands.cmd_serve_agent)

    sample = sub.add_parser("sample", help="export a scenario CSV")
    _case(sample)
    sample.add_argument("--scenarios", type=int)
    sample.add_argument("--full-defaults", action="store_true")
    sample.add_argument("--seed", type=int)
    sample.add_argument("--fresh", action="store_true", help="draw from the audit stream")
    sample.add_argument("--out", default="scenarios.csv")
    sample.set_defaults(handler=commands.cmd_sample)

    fit = sub.add_parser("fit-margin", help="print the PWL frequency margin fit")
    _case(fit)
    fit.add_argument("--segments", type=int)
    fit.add_argument("--grid", type=int)
    fit.add_argument("--out")
    fit.set_defaults(handler=commands.cmd_fit_margin)

    lp = sub.add_parser("export-lp", help="write every subproblem as an LP file")
    _case(lp)
    _sampling(lp)
    lp.add_argument("--out", default="lp")
    lp.set_defaults(handler=commands.cmd_export_lp)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except (CaseParseError, CaseValidationError, ModelBuildError, FileNotFoundError, ValidationError, ValueError) as e:
        print(f"❌ {e}", file=sys.stderr)
        commands.diagnostics_to_stderr(e)
        return EXIT_INPUT
    except (ConvergenceError, AgentAbort) as e:
        print(f"❌ {e}", file=sys.stderr)
        if e.history:
            print(f"  {len(e.history)} ADMM iterations recorded before the failure", file=sys.stderr)
        return EXIT_RUNTIME
    except EngineError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
