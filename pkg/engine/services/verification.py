"""
Monte-Carlo security verification of a dispatch
Each fresh scenario is realized the way the dispatch would respond: the
system disturbance is shared by the thermal fleets in proportion to their
scheduled SFR reserves, the ADN share crosses the boundary as dp_b, and
every ADN absorbs the gap between its planned and its actual import with
its DGs. Voltages and flows come from the linear model (optionally also
from the Newton oracle).
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from models.case import ItdCase, region_name
from models.errors import PowerFlowError, SingularJacobianError
from models.schemas import DispatchResult, FrequencyReport, PeriodDispatch, RunMode, VerifyReport
from services.frequency import PwlMarginFit, aggregate_dispatch, check_indices, compute_indices
from services.powerflow import SensitivityBundle, build_sensitivities, solve_ac_powerflow
from services.uncertainty import ScenarioSet, case_bounds, renewable_outputs

logger = logging.getLogger(__name__)

TOL = 1e-6
AC_SAMPLE_LIMIT = 50
# share of regional net load in the sign presets
DEFAULT_PRESET_FRACTION = 0.3

# (sign of the TPS disturbance, sign of the ADN disturbances)
PRESET_SIGNS = {1: (1.0, 1.0), 2: (-1.0, 1.0), 3: (1.0, -1.0), 4: (-1.0, -1.0)}


@dataclass
class RealizedPeriod:
    """Per-scenario nodal injections (n x buses) and SFR outcome of one period"""
    p: Dict[str, np.ndarray]
    q: Dict[str, np.ndarray]
    dp: Dict[int, np.ndarray]
    shortfall: np.ndarray


def _base_injections(case: ItdCase, period: PeriodDispatch, region: str) -> Tuple[np.ndarray, np.ndarray]:
    data = case.regions[region]
    index = data.network.bus_index
    p = np.zeros(len(index))
    q = np.zeros(len(index))
    t = period.period
    for bus, value in data.demand(t).items():
        p[index[bus]] -= value
    for bus, value in data.reactive_demand(t).items():
        q[index[bus]] -= value
    buses = {u.id: u.bus for u in list(data.thermal) + list(data.renewables) + list(data.storage) + list(data.compensators)}
    for record in period.units:
        if record.region != region:
            continue
        p[index[buses[record.unit]]] += record.p
        q[index[buses[record.unit]]] += record.q
    return p, q


def _regional_errors(case: ItdCase, scenarios: ScenarioSet, region: str, t: int) -> np.ndarray:
    """n x buses demand-error matrix of one region"""
    index = case.regions[region].network.bus_index
    out = np.zeros((scenarios.n, len(index)))
    for bus, draws in scenarios.demand_errors(region, t).items():
        out[:, index[bus]] += draws
    return out


def allocate_regulation(
    period: PeriodDispatch,
    zeta: Dict[str, np.ndarray],
    coordinated: bool,
) -> Tuple[Dict[str, np.ndarray], np.ndarray]:
    """
    SFR deployment per region for the regional disturbances zeta. Coordinated
    dispatches share the system disturbance in proportion to the scheduled
    thermal reserves; independent ones cover their own. Also returns the
    scenarios the reserves cannot cover.
    """
    n = len(next(iter(zeta.values())))
    reserve = {}
    for region in zeta:
        units = [u for u in period.units if u.region == region and u.kind == "thermal"]
        reserve[region] = (sum(u.r_up for u in units), sum(u.r_dn for u in units))

    deployment: Dict[str, np.ndarray] = {}
    shortfall = np.zeros(n, dtype=bool)
    if coordinated:
        sigma = sum(zeta.values())
        cap_up = sum(r[0] for r in reserve.values())
        cap_dn = sum(r[1] for r in reserve.values())
        shortfall = (sigma > cap_up + TOL) | (sigma < -cap_dn - TOL)
        for region, (up, dn) in reserve.items():
            share = np.where(sigma >= 0, up / cap_up if cap_up > 0 else 0.0, dn / cap_dn if cap_dn > 0 else 0.0)
            deployment[region] = np.clip(sigma * share, -dn, up)
    else:
        for region, (up, dn) in reserve.items():
            shortfall |= (zeta[region] > up + TOL) | (zeta[region] < -dn - TOL)
            deployment[region] = np.clip(zeta[region], -dn, up)
    return deployment, shortfall


def realize_period(case: ItdCase, result: DispatchResult, scenarios: ScenarioSet, t: int) -> RealizedPeriod:
    period = result.period(t)
    coordinated = result.mode != RunMode.IFC
    n = scenarios.n
    regions = list(case.regions)
    p, q, errors = {}, {}, {}
    for region in regions:
        base_p, base_q = _base_injections(case, period, region)
        errors[region] = _regional_errors(case, scenarios, region, t)
        p[region] = np.tile(base_p, (n, 1)) - errors[region]
        q[region] = np.tile(base_q, (n, 1))

    zeta = {region: errors[region].sum(axis=1) for region in regions}
    deployment, shortfall = allocate_regulation(period, zeta, coordinated)

    dp: Dict[int, np.ndarray] = {}
    tps_index = case.tps.network.bus_index
    for link in case.links:
        b = link.adn_id
        adn = region_name(b)
        boundary = period.boundary(b)
        dp[b] = deployment[adn] - zeta[adn] if coordinated else np.zeros(n)
        p["tps"][:, tps_index[link.tps_bus]] += dp[b] - boundary.p_tps
        q["tps"][:, tps_index[link.tps_bus]] -= boundary.q_tps
        adn_index = case.adn(b).region.network.bus_index
        p[adn][:, adn_index[link.adn_root_bus]] += boundary.p_tps - dp[b]
        q[adn][:, adn_index[link.adn_root_bus]] += boundary.q_tps
        # the DGs cover the gap between the planned and the delivered import
        if boundary.p_adn is not None:
            deployment[adn] = deployment[adn] + (boundary.p_adn - boundary.p_tps)

    for region in regions:
        index = case.regions[region].network.bus_index
        for g in case.regions[region].thermal:
            p[region][:, index[g.bus]] += g.agc_factor * deployment[region]
    return RealizedPeriod(p=p, q=q, dp=dp, shortfall=shortfall)


def _linear(bundle: SensitivityBundle, p: np.ndarray, q: np.ndarray) -> Dict[str, np.ndarray]:
    dp = p - bundle.point.p_inj
    dq = q - bundle.point.q_inj
    return {
        "theta": bundle.theta0 + dp @ bundle.a_p.T + dq @ bundle.a_q.T,
        "v": bundle.v0 + dp @ bundle.b_p.T + dq @ bundle.b_q.T,
        "line_p": bundle.flow_p0 + dp @ bundle.f_p.T + dq @ bundle.f_q.T,
        "line_q": bundle.flow_q0 + dp @ bundle.fq_p.T + dq @ bundle.fq_q.T,
    }


def _ibr_violations(case: ItdCase, period: PeriodDispatch, scenarios: ScenarioSet, t: int) -> np.ndarray:
    freq = case.frequency
    violated = np.zeros(scenarios.n, dtype=bool)
    for region in case.regions:
        available = renewable_outputs(scenarios, case, region, t)
        for w in case.regions[region].renewables:
            record = period.unit(region, w.id)
            need = record.p + 2.0 * freq.rocof_max * record.h + freq.nadir_max * record.d
            violated |= need > available[w.id] + TOL
    return violated


def verify_dispatch(
    case: ItdCase,
    result: DispatchResult,
    scenarios: ScenarioSet,
    ac: bool = False,
    sensitivities: Optional[Dict[str, SensitivityBundle]] = None,
) -> Tuple[VerifyReport, pd.DataFrame]:
    """Violation rates on fresh scenarios plus a per-scenario voltage table"""
    sensitivities = sensitivities or {
        name: build_sensitivities(region.network) for name, region in case.regions.items()
    }
    n, horizon = scenarios.n, case.horizon
    voltage_bad = np.zeros((n, horizon), dtype=bool)
    line_bad = np.zeros((n, horizon), dtype=bool)
    ibr_bad = np.zeros((n, horizon), dtype=bool)
    boundary_bad = np.zeros((n, horizon), dtype=bool)
    sfr_bad = np.zeros((n, horizon), dtype=bool)
    rows = []
    ac_v: List[float] = []
    ac_failures = 0

    for t in range(horizon):
        period = result.period(t)
        realized = realize_period(case, result, scenarios, t)
        v_lo = np.full(n, np.inf)
        v_hi = np.full(n, -np.inf)
        for region, data in case.regions.items():
            bundle = sensitivities[region]
            linear = _linear(bundle, realized.p[region], realized.q[region])
            network = data.network
            v_min = np.array([network.bus(b).v_min for b in bundle.non_slack])
            v_max = np.array([network.bus(b).v_max for b in bundle.non_slack])
            volts = linear["v"]
            if volts.shape[1]:
                voltage_bad[:, t] |= ((volts < v_min - TOL) | (volts > v_max + TOL)).any(axis=1)
                v_lo = np.minimum(v_lo, volts.min(axis=1))
                v_hi = np.maximum(v_hi, volts.max(axis=1))
            slack_v = float(bundle.point.v[bundle.column(network.slack)])
            v_lo = np.minimum(v_lo, slack_v)
            v_hi = np.maximum(v_hi, slack_v)
            limits = np.array([br.flow_limit for br in network.branches])
            if len(limits):
                if region == "tps":
                    magnitude = np.abs(linear["line_p"])
                else:
                    magnitude = np.hypot(linear["line_p"], linear["line_q"])
                line_bad[:, t] |= (magnitude > limits + TOL).any(axis=1)

        for link in case.links:
            boundary = period.boundary(link.adn_id)
            exchange = np.hypot(boundary.p_tps - realized.dp[link.adn_id], boundary.q_tps)
            boundary_bad[:, t] |= exchange > link.capacity + TOL
        ibr_bad[:, t] = _ibr_violations(case, period, scenarios, t)
        sfr_bad[:, t] = realized.shortfall

        if ac:
            for i in range(min(n, AC_SAMPLE_LIMIT)):
                for region, data in case.regions.items():
                    try:
                        state = solve_ac_powerflow(data.network, realized.p[region][i], realized.q[region][i])
                    except (PowerFlowError, SingularJacobianError) as e:
                        ac_failures += 1
                        logger.debug(f"AC check failed for {region}, scenario {i}, period {t}: {e}")
                        continue
                    ac_v.extend([float(state.v.min()), float(state.v.max())])

        for i in range(n):
            rows.append({
                "scenario": i, "period": t, "v_min": float(v_lo[i]), "v_max": float(v_hi[i]),
                "voltage_violation": bool(voltage_bad[i, t]), "line_violation": bool(line_bad[i, t]),
                "ibr_violation": bool(ibr_bad[i, t]), "boundary_violation": bool(boundary_bad[i, t]),
                "sfr_shortfall": bool(sfr_bad[i, t]),
            })

    table = pd.DataFrame(rows)
    mismatch = max(
        (b.p_mismatch for period in result.periods for b in period.boundaries), default=0.0,
    )
    report = VerifyReport(
        case_hash=result.case_hash,
        scenarios=n,
        seed=scenarios.seed if scenarios.seed is not None else -1,
        voltage_violations=int(voltage_bad.any(axis=1).sum()),
        voltage_violation_rate=float(voltage_bad.mean()) if voltage_bad.size else 0.0,
        line_violation_rate=float(line_bad.mean()) if line_bad.size else 0.0,
        ibr_violation_rate=float(ibr_bad.mean()) if ibr_bad.size else 0.0,
        boundary_violations=int(boundary_bad.any(axis=1).sum()),
        sfr_violation_rate=float(sfr_bad.mean()) if sfr_bad.size else 0.0,
        v_min=float(table["v_min"].min()) if len(table) else 1.0,
        v_max=float(table["v_max"].max()) if len(table) else 1.0,
        boundary_mismatch=mismatch,
        audit=result.audit,
        ac_checked=ac,
        ac_v_min=min(ac_v) if ac_v else None,
        ac_v_max=max(ac_v) if ac_v else None,
        ac_failures=ac_failures,
    )
    status = "✅" if report.clean else "⚠️"
    logger.info(
        f"{status} Verified {result.mode.value} dispatch on {n} scenarios: "
        f"{report.voltage_violations} voltage-violating, line rate {report.line_violation_rate:.3f}, "
        f"IBR rate {report.ibr_violation_rate:.3f}, SFR shortfall rate {report.sfr_violation_rate:.3f}"
    )
    return report, table


def export_verify_csv(table: pd.DataFrame, path: Path) -> Path:
    table.to_csv(path, index=False)
    logger.info(f"✅ Wrote verification table ({len(table)} rows) to {path}")
    return Path(path)


def net_load(case: ItdCase, region: str, t: int) -> float:
    data = case.regions[region]
    return sum(data.demand(t).values()) - sum(data.forecast(w, t) for w in data.renewables)


def preset_components(
    case: ItdCase,
    case_id: int,
    t: int = 0,
    fraction: Optional[float] = DEFAULT_PRESET_FRACTION,
) -> Dict[str, float]:
    """
    Signed step disturbance per region for a sign preset: +-fraction of each
    regional net load, or the worst-case disturbance bounds when fraction is None
    """
    if case_id not in PRESET_SIGNS:
        raise ValueError(f"unknown disturbance preset {case_id}, expected 1..4")
    sign_t, sign_d = PRESET_SIGNS[case_id]
    bounds = case_bounds(case)

    def magnitude(region: str, sign: float) -> float:
        if fraction is not None:
            return fraction * abs(net_load(case, region, t))
        b = bounds[region]
        return b.zeta_max if sign > 0 else -b.zeta_min

    components = {"tps": sign_t * magnitude("tps", sign_t)}
    for b in case.adn_ids:
        components[region_name(b)] = sign_d * magnitude(region_name(b), sign_d)
    return components


def preset_disturbance(
    case: ItdCase,
    case_id: int,
    t: int = 0,
    fraction: Optional[float] = DEFAULT_PRESET_FRACTION,
) -> float:
    """System step disturbance of a sign preset"""
    return sum(preset_components(case, case_id, t, fraction).values())


def boundary_response(
    case: ItdCase,
    result: DispatchResult,
    case_ids: Sequence[int] = tuple(PRESET_SIGNS),
    fraction: Optional[float] = DEFAULT_PRESET_FRACTION,
) -> pd.DataFrame:
    """Scheduled and post-regulation import of every ADN under each sign preset"""
    coordinated = result.mode != RunMode.IFC
    rows = []
    for period in result.periods:
        for case_id in case_ids:
            components = preset_components(case, case_id, period.period, fraction)
            zeta = {region: np.array([value]) for region, value in components.items()}
            deployment, shortfall = allocate_regulation(period, zeta, coordinated)
            for link in case.links:
                b = link.adn_id
                adn = region_name(b)
                base = period.boundary(b).p_tps
                regulation = float(deployment[adn][0] - zeta[adn][0]) if coordinated else 0.0
                rows.append({
                    "case_id": case_id, "period": period.period, "adn_id": b,
                    "base_p": base, "regulation": regulation, "actual_p": base - regulation,
                    "capacity": link.capacity, "sfr_shortfall": bool(shortfall[0]),
                })
    return pd.DataFrame(rows)


def allocation_shares(result: DispatchResult) -> Dict[str, float]:
    """ADN share of the dispatched IBR inertia and droop and of the thermal SFR reserves"""
    totals = {name: [0.0, 0.0] for name in ("h", "d", "r_up", "r_dn")}
    for period in result.periods:
        for unit in period.units:
            side = 0 if unit.region == "tps" else 1
            totals["h"][side] += unit.h
            totals["d"][side] += unit.d
            if unit.kind == "thermal":
                totals["r_up"][side] += unit.r_up
                totals["r_dn"][side] += unit.r_dn
    return {
        name: adn / (tps + adn) if tps + adn > TOL else 0.0
        for name, (tps, adn) in totals.items()
    }


def frequency_report(
    case: ItdCase,
    result: DispatchResult,
    disturbance: float,
    t: int = 0,
    margin: Optional[PwlMarginFit] = None,
) -> FrequencyReport:
    """Step response of the aggregated system under one period's dispatch"""
    period = result.period(t)
    params = aggregate_dispatch(case, period.ibr_h_total, period.ibr_d_total)
    within = True
    if margin is not None:
        h_lo, h_hi = margin.h_box
        d_lo, d_hi = margin.d_box
        inside = h_lo - TOL <= period.ibr_h_total <= h_hi + TOL and d_lo - TOL <= period.ibr_d_total <= d_hi + TOL
        within = inside and abs(disturbance) <= margin.margin(period.ibr_h_total, period.ibr_d_total) + TOL
        if not within:
            logger.warning(f"⚠️ disturbance {disturbance:.4f} p.u. lies outside the fitted margin domain")
    indices = compute_indices(params, disturbance)
    passed = check_indices(indices, case.frequency)
    return FrequencyReport(
        period=t,
        disturbance=disturbance,
        h_total=params.h_total,
        d_total=params.d_total,
        rocof=indices.rocof,
        nadir=indices.nadir,
        qss=indices.qss,
        passed=passed,
        within_margin_domain=within,
    )
