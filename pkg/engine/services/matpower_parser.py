"""
Parse MATPOWER v2 case text (bus / branch / gen / gencost blocks)
Pragmatic subset: polynomial gencost only, transformers treated as lines.
"""
import logging
import math
import re
from typing import Dict, List, Optional, Tuple

from models.case import BranchRecord, BusKind, BusRecord, Diagnostic, Network, ThermalUnit
from models.errors import CaseParseError, CaseValidationError

logger = logging.getLogger(__name__)

BLOCK_START = re.compile(r'^\s*mpc\.(bus|branch|gen|gencost)\s*=\s*\[\s*(.*)$')
BASE_MVA = re.compile(r'^\s*mpc\.baseMVA\s*=\s*([-+0-9.eE]+)\s*;')
CASE_NAME = re.compile(r'^\s*function\s+mpc\s*=\s*(\w+)')

MIN_ARITY = {"bus": 13, "branch": 11, "gen": 10, "gencost": 4}
BUS_KINDS = {1: BusKind.PQ, 2: BusKind.PV, 3: BusKind.SLACK}


def _strip_comment(line: str) -> str:
    return line.split('%', 1)[0]


def _tokenize(row: str, line_no: int) -> List[float]:
    """Split one matrix row into numbers"""
    tokens = [t for t in re.split(r'[\s,]+', row.strip()) if t]
    values = []
    for token in tokens:
        try:
            values.append(float(token))
        except ValueError:
            raise CaseParseError(f"non-numeric entry '{token}'", line_no)
    return values


def _read_blocks(text: str) -> Tuple[Dict[str, List[Tuple[int, List[float]]]], float, str]:
    """Collect numeric rows of every supported block, keeping line numbers"""
    blocks: Dict[str, List[Tuple[int, List[float]]]] = {}
    base_mva = 100.0
    name = "matpower"
    current: Optional[str] = None

    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if current is None:
            name_match = CASE_NAME.match(line)
            if name_match:
                name = name_match.group(1)
                continue
            base_match = BASE_MVA.match(line)
            if base_match:
                base_mva = float(base_match.group(1))
                continue
            start = BLOCK_START.match(line)
            if not start:
                continue
            current = start.group(1)
            blocks[current] = []
            line = start.group(2)

        closed = ']' in line
        body = line.split(']', 1)[0] if closed else line
        for row in body.split(';'):
            if row.strip():
                blocks[current].append((line_no, _tokenize(row, line_no)))
        if closed:
            current = None

    if current is not None:
        raise CaseParseError(f"unterminated '{current}' block", len(text.splitlines()))
    return blocks, base_mva, name


def _check_arity(kind: str, rows: List[Tuple[int, List[float]]]):
    for line_no, values in rows:
        if len(values) < MIN_ARITY[kind]:
            raise CaseParseError(
                f"{kind} row has {len(values)} columns, expected at least {MIN_ARITY[kind]}",
                line_no,
            )


def parse_matpower_subset(
    text: str,
    dt: float = 0.25,
    f0: float = 50.0,
) -> Tuple[Network, List[ThermalUnit]]:
    """
    Parse MATPOWER text into one per-unit network plus its thermal units
    Costs become k$ per p.u. per dispatch period of length dt hours.
    """
    blocks, base, name = _read_blocks(text)
    for kind in ("bus", "branch", "gen"):
        if kind not in blocks:
            raise CaseParseError(f"missing '{kind}' block")
    for kind, rows in blocks.items():
        _check_arity(kind, rows)

    buses = []
    seen_bus = set()
    for line_no, v in blocks["bus"]:
        bus_id = int(v[0])
        if bus_id in seen_bus:
            raise CaseParseError(f"duplicate bus {bus_id}", line_no)
        seen_bus.add(bus_id)
        kind = BUS_KINDS.get(int(v[1]))
        if kind is None:
            logger.warning(f"⚠️ line {line_no}: isolated/unknown bus type {int(v[1])}, treated as PQ")
            kind = BusKind.PQ
        if v[4] or v[5]:
            logger.warning(f"⚠️ line {line_no}: bus shunt Gs/Bs ignored")
        buses.append(BusRecord(
            id=bus_id,
            kind=kind,
            p_demand=v[2] / base,
            q_demand=v[3] / base,
            v_min=v[12],
            v_max=v[11],
        ))

    if not any(b.kind == BusKind.SLACK for b in buses):
        raise CaseValidationError([
            Diagnostic(entity=f"network {name}", invariant="one-slack", message="missing slack bus")
        ])

    branches = []
    for line_no, v in blocks["branch"]:
        if len(v) > 10 and v[10] == 0:
            logger.warning(f"⚠️ line {line_no}: out-of-service branch skipped")
            continue
        if v[3] == 0:
            raise CaseParseError("zero reactance", line_no)
        if len(v) > 9 and ((v[8] not in (0.0, 1.0)) or v[9] != 0.0):
            logger.warning(f"⚠️ line {line_no}: transformer ratio/shift ignored")
        for bus in (int(v[0]), int(v[1])):
            if bus not in seen_bus:
                raise CaseParseError(f"branch references unknown bus {bus}", line_no)
        rate = v[5]
        branches.append(BranchRecord(
            from_bus=int(v[0]),
            to_bus=int(v[1]),
            r=v[2],
            x=v[3],
            b_shunt=v[4],
            flow_limit=rate / base if rate > 0 else math.inf,
        ))

    gens = blocks["gen"]
    costs = blocks.get("gencost", [])
    if costs and len(costs) < len(gens):
        raise CaseParseError(
            f"gencost has {len(costs)} rows for {len(gens)} generators", costs[-1][0]
        )

    units = []
    share = 1.0 / len(gens) if gens else 0.0
    money = dt / 1000.0
    for k, (line_no, v) in enumerate(gens):
        if len(v) > 7 and v[7] <= 0:
            logger.warning(f"⚠️ line {line_no}: out-of-service generator skipped")
            continue
        if int(v[0]) not in seen_bus:
            raise CaseParseError(f"generator references unknown bus {int(v[0])}", line_no)
        c2 = c1 = c0 = 0.0
        if costs:
            cost_line, c = costs[k]
            if int(c[0]) != 2:
                raise CaseParseError("only polynomial (model 2) gencost is supported", cost_line)
            n = int(c[3])
            if len(c) < 4 + n:
                raise CaseParseError(f"gencost row declares {n} coefficients", cost_line)
            coeffs = c[4:4 + n]
            padded = [0.0] * (3 - len(coeffs)) + list(coeffs[-3:])
            if n > 3:
                logger.warning(f"⚠️ line {cost_line}: cubic and higher cost terms ignored")
            c2, c1, c0 = padded
        p_max = v[8] / base
        units.append(ThermalUnit(
            id=f"g{k + 1}",
            bus=int(v[0]),
            p_min=v[9] / base,
            p_max=p_max,
            q_min=v[4] / base,
            q_max=v[3] / base,
            cost_quadratic=c2 * base * base * money,
            cost_linear=c1 * base * money,
            cost_constant=c0 * money,
            agc_factor=share,
            droop_R=0.05 * f0 / p_max if p_max > 0 else 1.0,
        ))

    network = Network(name=name, base_mva=base, buses=buses, branches=branches)
    logger.info(f"✅ Parsed MATPOWER case {name}: {len(buses)} buses, {len(branches)} branches, {len(units)} units")
    return network, units
