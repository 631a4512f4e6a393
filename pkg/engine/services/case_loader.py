"""
ITD case loading, validation and serialization
The JSON surface is in MW / MVar (costs in $/MWh); in memory everything is
per-unit on the case base with costs in k$ per dispatch period.
"""
import enum
import json
import logging
import math
from collections import Counter
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from pydantic import BaseModel, ValidationError

from models.case import (
    BoundaryLink,
    BranchRecord,
    BusKind,
    BusRecord,
    Diagnostic,
    ForecastSource,
    FrequencyParams,
    GovernorParams,
    ItdCase,
    Network,
    ReactiveCompensator,
    RegionData,
    RenewableUnit,
    SourceKind,
    StorageUnit,
    ThermalUnit,
    region_name,
)
from models.errors import CaseParseError, CaseValidationError
from services.matpower_parser import parse_matpower_subset

logger = logging.getLogger(__name__)

AGC_TOLERANCE = 1e-9
DEFAULT_ERROR_FRACTION = 0.10

# Exponent of the MVA base carried by each power-like field
POWER_FIELDS = {
    BusRecord: {"p_demand": 1, "q_demand": 1},
    BranchRecord: {"flow_limit": 1},
    ThermalUnit: {"p_min": 1, "p_max": 1, "q_min": 1, "q_max": 1, "ramp": 1, "pfr_cap": 1, "droop_R": -1},
    RenewableUnit: {"forecast_max": 1, "q_min": 1, "q_max": 1, "h_max": 1, "d_max": 1},
    StorageUnit: {"p_charge_max": 1, "p_discharge_max": 1, "energy_cap": 1, "h_max": 1, "d_max": 1},
    ReactiveCompensator: {"q_min": 1, "q_max": 1},
    BoundaryLink: {"capacity": 1},
    FrequencyParams: {"h_thermal": 1, "damping": 1},
    GovernorParams: {"r_g": -1},
    ForecastSource: {"lo": 1, "hi": 1},
}

# Cost fields: $/MW^k h  ->  k$ per p.u.^k per period
COST_FIELDS = {
    ThermalUnit: {"cost_quadratic": 2, "cost_linear": 1, "cost_constant": 0,
                  "reserve_cost_up": 1, "reserve_cost_down": 1},
    RenewableUnit: {"curtail_cost": 1},
    StorageUnit: {"loss_cost": 1, "reserve_cost_up": 1, "reserve_cost_down": 1},
}


def _rescale(model: Any, base: float, dt: float, inverse: bool = False) -> Any:
    """Convert every power and cost field of a record tree to (or from) per-unit"""
    if isinstance(model, list):
        return [_rescale(item, base, dt, inverse) for item in model]
    if not isinstance(model, BaseModel):
        return model

    update: Dict[str, Any] = {}
    for field, exponent in POWER_FIELDS.get(type(model), {}).items():
        factor = base ** exponent
        value = getattr(model, field)
        update[field] = value * factor if inverse else value / factor
    for field, exponent in COST_FIELDS.get(type(model), {}).items():
        factor = base ** exponent * dt / 1000.0
        value = getattr(model, field)
        update[field] = value / factor if inverse else value * factor
    for field in type(model).model_fields:
        value = getattr(model, field)
        if isinstance(value, (BaseModel, list)):
            update[field] = _rescale(value, base, dt, inverse)
    if isinstance(model, Network):
        update["base_mva"] = base
    return model.model_copy(update=update)


def to_per_unit(case: ItdCase) -> ItdCase:
    """Normalize a MW-valued case; identity on a case that is already per-unit"""
    if case.per_unit:
        return case
    converted = _rescale(case, case.base_mva, case.dt)
    return converted.model_copy(update={"per_unit": True})


def from_per_unit(case: ItdCase) -> ItdCase:
    if not case.per_unit:
        return case
    converted = _rescale(case, case.base_mva, case.dt, inverse=True)
    return converted.model_copy(update={"per_unit": False})


def _drop_nulls(value: Any) -> Any:
    """JSON null means 'use the default' (infinite ramp, unlimited flow...)"""
    if isinstance(value, dict):
        return {k: _drop_nulls(v) for k, v in value.items() if v is not None}
    if isinstance(value, list):
        return [_drop_nulls(v) for v in value]
    return value


def _json_ready(value: Any) -> Any:
    """Strip infinities (they serialize as absent fields) and unwrap enums"""
    if isinstance(value, dict):
        return {
            k: _json_ready(v) for k, v in value.items()
            if not (isinstance(v, float) and math.isinf(v))
        }
    if isinstance(value, list):
        return [_json_ready(v) for v in value]
    if isinstance(value, enum.Enum):
        return value.value
    return value


def _merge_matpower(region: Dict[str, Any], base_dir: Path, base: float, dt: float, f0: float):
    """Replace a `matpower` reference by the parsed network and thermal fleet"""
    path = base_dir / region.pop("matpower")
    try:
        text = path.read_text()
    except OSError as e:
        raise CaseParseError(f"cannot read MATPOWER file {path}: {e}")

    network, units = parse_matpower_subset(text, dt=dt, f0=f0)
    if network.base_mva != base:
        ratio = base / network.base_mva
        network = network.model_copy(update={
            "branches": [
                br.model_copy(update={"r": br.r * ratio, "x": br.x * ratio, "b_shunt": br.b_shunt / ratio})
                for br in network.branches
            ],
        })
    # parsed records are per-unit on their own base; the raw case is in MW
    network = _rescale(network, network.base_mva, dt, inverse=True)
    units = _rescale(units, network.base_mva, dt, inverse=True)
    region["network"] = network.model_dump()

    overrides = {entry["bus"]: entry for entry in region.get("thermal", []) if "bus" in entry}
    merged = []
    for unit in units:
        record = unit.model_dump()
        record.update(overrides.pop(unit.bus, {}))
        merged.append(record)
    for bus in overrides:
        logger.warning(f"⚠️ thermal override for bus {bus} matches no MATPOWER generator")
    region["thermal"] = merged


def default_sources(case: ItdCase) -> List[ForecastSource]:
    """Beta(2,2) errors on +/-10 % of every bus demand and renewable forecast"""
    sources = []
    for name, region in case.regions.items():
        for bus in region.network.buses:
            spread = DEFAULT_ERROR_FRACTION * abs(bus.p_demand)
            if spread > 0:
                sources.append(ForecastSource(
                    id=f"{name}.d{bus.id}", kind=SourceKind.DEMAND, region=name,
                    target=str(bus.id), lo=-spread, hi=spread,
                ))
        for unit in region.renewables:
            spread = DEFAULT_ERROR_FRACTION * unit.forecast_max
            if spread > 0:
                sources.append(ForecastSource(
                    id=f"{name}.{unit.id}", kind=SourceKind(unit.kind.value), region=name,
                    target=unit.id, lo=-spread, hi=spread,
                ))
    return sources


def parse_itd_case(
    data: Union[bytes, str],
    base_dir: Optional[Path] = None,
    strict: bool = True,
) -> ItdCase:
    """Parse ITD JSON (MW units) into a validated per-unit ItdCase"""
    try:
        raw = json.loads(data)
    except json.JSONDecodeError as e:
        raise CaseParseError(f"invalid JSON: {e.msg}", e.lineno)
    except UnicodeDecodeError as e:
        raise CaseParseError(f"case is not UTF-8 text: {e.reason}")
    if not isinstance(raw, dict):
        raise CaseParseError("top-level JSON value must be an object")
    raw = _drop_nulls(raw)

    base = float(raw.get("base_mva", 100.0))
    dt = float(raw.get("dt", 0.25))
    f0 = float(raw.get("frequency", {}).get("f0", 50.0)) if isinstance(raw.get("frequency"), dict) else 50.0

    regions = [("tps", raw.get("tps"))]
    regions += [
        (region_name(a.get("adn_id", -1)), a.get("region"))
        for a in raw.get("adns", []) if isinstance(a, dict)
    ]
    for name, region in regions:
        if not isinstance(region, dict):
            continue
        region.setdefault("name", name)
        if "matpower" in region:
            _merge_matpower(region, base_dir or Path("."), base, dt, f0)

    synthesize = "uncertainty" not in raw
    raw["per_unit"] = False
    try:
        case = ItdCase.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"])
        raise CaseParseError(f"schema violation at {where}: {first['msg']} ({e.error_count()} errors)")

    if synthesize:
        case = case.model_copy(update={
            "uncertainty": case.uncertainty.model_copy(update={"sources": default_sources(case)})
        })

    case = to_per_unit(case)
    diagnostics = validate_case(case)
    if diagnostics:
        for diagnostic in diagnostics:
            logger.warning(f"⚠️ {diagnostic}")
        if strict:
            raise CaseValidationError(diagnostics)
    logger.info(
        f"✅ Loaded ITD case: TPS {len(case.tps.network.buses)} buses, "
        f"{len(case.adns)} ADNs, {len(case.uncertainty.sources)} uncertainty sources"
    )
    return case


def load_case(path: Union[str, Path], strict: bool = True) -> ItdCase:
    """Read an ITD JSON file; MATPOWER references resolve relative to it"""
    path = Path(path)
    data = path.read_bytes()
    return parse_itd_case(data, base_dir=path.parent, strict=strict)


def serialize_case(case: ItdCase) -> bytes:
    """Inverse of parse_itd_case: JSON in MW / MVar with $/MWh costs"""
    raw = from_per_unit(case).model_dump(exclude={"per_unit"})
    return json.dumps(_json_ready(raw), indent=2, sort_keys=False).encode()


def _validate_network(region: RegionData, out: List[Diagnostic]):
    net = region.network
    entity = f"{region.name} network"
    slack_count = sum(1 for b in net.buses if b.kind == BusKind.SLACK)
    if slack_count != 1:
        out.append(Diagnostic(entity=entity, invariant="one-slack",
                              message=f"{slack_count} slack buses, expected exactly one"))
    for bus_id, count in Counter(net.bus_ids).items():
        if count > 1:
            out.append(Diagnostic(entity=f"{region.name} bus {bus_id}", invariant="unique-id",
                                  message="duplicate bus id"))
    for bus in net.buses:
        if not bus.v_min < bus.v_max:
            out.append(Diagnostic(entity=f"{region.name} bus {bus.id}", invariant="voltage-window",
                                  message=f"v_min {bus.v_min} not below v_max {bus.v_max}"))
        if not (math.isfinite(bus.p_demand) and math.isfinite(bus.q_demand)):
            out.append(Diagnostic(entity=f"{region.name} bus {bus.id}", invariant="finite-demand",
                                  message="demand is not finite"))

    known = set(net.bus_ids)
    for branch in net.branches:
        entity = f"{region.name} branch {branch.key}"
        if branch.x == 0:
            out.append(Diagnostic(entity=entity, invariant="nonzero-reactance", message="zero reactance"))
        if not branch.flow_limit > 0:
            out.append(Diagnostic(entity=entity, invariant="positive-limit",
                                  message=f"flow limit {branch.flow_limit} must be positive"))
        for bus in (branch.from_bus, branch.to_bus):
            if bus not in known:
                out.append(Diagnostic(entity=entity, invariant="dangling-reference",
                                      message=f"unknown bus {bus}"))


def _validate_units(region: RegionData, out: List[Diagnostic]):
    known = set(region.network.bus_ids)
    units = region.thermal + region.renewables + region.storage + region.compensators
    for unit_id, count in Counter(u.id for u in units).items():
        if count > 1:
            out.append(Diagnostic(entity=f"{region.name} unit {unit_id}", invariant="unique-id",
                                  message="duplicate unit id"))
    for unit in units:
        if unit.bus not in known:
            out.append(Diagnostic(entity=f"{region.name} unit {unit.id}", invariant="dangling-reference",
                                  message=f"unknown bus {unit.bus}"))

    for g in region.thermal:
        entity = f"{region.name} thermal {g.id}"
        if g.p_min > g.p_max:
            out.append(Diagnostic(entity=entity, invariant="p-window", message="p_min exceeds p_max"))
        if not 0.0 <= g.agc_factor <= 1.0:
            out.append(Diagnostic(entity=entity, invariant="agc-range",
                                  message=f"agc_factor {g.agc_factor} outside [0, 1]"))
        if not g.droop_R > 0:
            out.append(Diagnostic(entity=entity, invariant="positive-droop", message="droop_R must be positive"))
    if region.thermal:
        total = sum(g.agc_factor for g in region.thermal)
        if abs(total - 1.0) > AGC_TOLERANCE:
            out.append(Diagnostic(entity=f"{region.name} thermal fleet", invariant="agc-sum",
                                  message=f"AGC factors sum to {total:.12g}, expected 1"))

    for w in region.renewables:
        entity = f"{region.name} renewable {w.id}"
        if w.forecast_max < 0:
            out.append(Diagnostic(entity=entity, invariant="nonnegative-forecast",
                                  message="forecast_max is negative"))
        if w.h_max < 0 or w.d_max < 0:
            out.append(Diagnostic(entity=entity, invariant="nonnegative-caps",
                                  message="h_max / d_max must be non-negative"))

    for e in region.storage:
        entity = f"{region.name} storage {e.id}"
        if not 0.0 <= e.soc_min <= e.soc_init <= e.soc_max <= 1.0:
            out.append(Diagnostic(entity=entity, invariant="soc-order",
                                  message=f"need 0 <= soc_min <= soc_init <= soc_max <= 1, "
                                          f"got {e.soc_min}/{e.soc_init}/{e.soc_max}"))
        for name in ("eff_charge", "eff_discharge"):
            value = getattr(e, name)
            if not 0.0 < value <= 1.0:
                out.append(Diagnostic(entity=entity, invariant="efficiency-range",
                                      message=f"{name} {value} outside (0, 1]"))
        if e.h_max < 0 or e.d_max < 0:
            out.append(Diagnostic(entity=entity, invariant="nonnegative-caps",
                                  message="h_max / d_max must be non-negative"))

    for c in region.compensators:
        if c.q_min > c.q_max:
            out.append(Diagnostic(entity=f"{region.name} compensator {c.id}", invariant="q-window",
                                  message="q_min exceeds q_max"))


def validate_case(case: ItdCase) -> List[Diagnostic]:
    """Collect every violated case invariant; empty list means healthy"""
    out: List[Diagnostic] = []
    regions = case.regions

    for region in regions.values():
        _validate_network(region, out)
        _validate_units(region, out)

    for adn_id, count in Counter(a.adn_id for a in case.adns).items():
        if count > 1:
            out.append(Diagnostic(entity=f"ADN {adn_id}", invariant="unique-id", message="duplicate ADN id"))

    tps_buses = set(case.tps.network.bus_ids)
    link_counts = Counter(link.adn_id for link in case.links)
    for link in case.links:
        entity = f"boundary ADN {link.adn_id}"
        if link_counts[link.adn_id] > 1:
            out.append(Diagnostic(entity=entity, invariant="unique-boundary",
                                  message=f"duplicate boundary for ADN {link.adn_id}"))
        if not link.capacity > 0:
            out.append(Diagnostic(entity=entity, invariant="positive-capacity",
                                  message="boundary capacity must be positive"))
        if link.tps_bus not in tps_buses:
            out.append(Diagnostic(entity=entity, invariant="dangling-reference",
                                  message=f"TPS bus {link.tps_bus} does not exist"))
        try:
            adn = case.adn(link.adn_id)
        except KeyError:
            out.append(Diagnostic(entity=entity, invariant="dangling-reference",
                                  message=f"ADN {link.adn_id} does not exist"))
            continue
        slacks = [b.id for b in adn.region.network.buses if b.kind == BusKind.SLACK]
        if slacks != [link.adn_root_bus]:
            out.append(Diagnostic(entity=entity, invariant="root-is-slack",
                                  message=f"root bus {link.adn_root_bus} is not the ADN slack"))
    for adn in case.adns:
        if link_counts[adn.adn_id] == 0:
            out.append(Diagnostic(entity=f"ADN {adn.adn_id}", invariant="linked-adn",
                                  message="ADN has no boundary link"))

    freq = case.frequency
    for name in ("rocof_max", "nadir_max", "qss_max", "f0", "h_thermal", "pfr_dv_max", "pfr_dtheta_max"):
        if not getattr(freq, name) > 0:
            out.append(Diagnostic(entity="frequency", invariant="positive-threshold",
                                  message=f"{name} must be positive"))
    if freq.damping < 0:
        out.append(Diagnostic(entity="frequency", invariant="nonnegative-damping",
                              message="damping must be non-negative"))
    gov = freq.governor
    if not (gov.r_g > 0 and gov.t_r > 0 and 0.0 <= gov.f_h <= 1.0):
        out.append(Diagnostic(entity="frequency governor", invariant="governor-params",
                              message="need r_g > 0, t_r > 0 and f_h in [0, 1]"))

    for name in ("delta_v", "delta_line", "delta_ibr", "delta_sfr"):
        value = getattr(case.levels, name)
        if not 0.0 <= value < 0.5:
            out.append(Diagnostic(entity="levels", invariant="level-range",
                                  message=f"{name} {value} outside [0, 0.5)"))

    if case.horizon < 1 or not case.dt > 0:
        out.append(Diagnostic(entity="case", invariant="horizon",
                              message="horizon must be >= 1 and dt positive"))

    for source in case.uncertainty.sources:
        entity = f"uncertainty source {source.id}"
        if not (source.alpha > 0 and source.beta > 0):
            out.append(Diagnostic(entity=entity, invariant="beta-shape", message="alpha, beta must be positive"))
        if not source.lo < source.hi:
            out.append(Diagnostic(entity=entity, invariant="support", message="lo must be below hi"))
        region = regions.get(source.region)
        if region is None:
            out.append(Diagnostic(entity=entity, invariant="dangling-reference",
                                  message=f"unknown region {source.region}"))
            continue
        if source.kind == SourceKind.DEMAND:
            targets = {str(b) for b in region.network.bus_ids}
        else:
            targets = {u.id for u in region.renewables if u.kind.value == source.kind.value}
        if source.target not in targets:
            out.append(Diagnostic(entity=entity, invariant="dangling-reference",
                                  message=f"unknown {source.kind.value} target {source.target}"))
    for source_id, count in Counter(s.id for s in case.uncertainty.sources).items():
        if count > 1:
            out.append(Diagnostic(entity=f"uncertainty source {source_id}", invariant="unique-id",
                                  message="duplicate source id"))
    return out
