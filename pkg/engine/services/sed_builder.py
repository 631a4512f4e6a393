"""
FC-SED program builders
TPS and ADN subproblems, the centralized CFC-SED reference and the IFC
baselines. Nodal injections are affine in the decision variables, the
forecast-error columns of the scenario set and the boundary regulation
power dp_b; dp_b terms are replaced by the envelope end that is worst for
each row before the row reaches the program.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from config import get_settings
from models.case import ItdCase, RegionData, SourceKind, region_name
from models.errors import ModelBuildError, PowerFlowError, SingularJacobianError
from services.frequency import PwlMarginFit, fit_case_margin, thermal_pfr
from services.powerflow import SensitivityBundle, build_sensitivities, solve_ac_powerflow
from services.saa import JccBlock, RowFamily, UncertainRow, attach_families, attach_robust, uncertain_generator
from services.uncertainty import (
    DisturbanceBounds,
    ScenarioSet,
    case_bounds,
    column_name,
    empirical_quantile,
    renewable_outputs,
    worst_case_rhs,
)
from solvers.program import MathProgram, Sense, merge_programs

logger = logging.getLogger(__name__)

COEF_TOL = 1e-12


@dataclass
class AffineExpr:
    """coeffs . x + const + loadings . zeta + dp . dp_b"""
    coeffs: Dict[str, float] = field(default_factory=dict)
    const: float = 0.0
    loadings: Dict[str, float] = field(default_factory=dict)
    dp: Dict[int, float] = field(default_factory=dict)

    def term(self, name: str, coef: float = 1.0) -> "AffineExpr":
        if coef:
            self.coeffs[name] = self.coeffs.get(name, 0.0) + coef
        return self

    def load(self, column: str, coef: float = 1.0) -> "AffineExpr":
        if coef:
            self.loadings[column] = self.loadings.get(column, 0.0) + coef
        return self

    def regulate(self, adn_id: int, coef: float = 1.0) -> "AffineExpr":
        if coef:
            self.dp[adn_id] = self.dp.get(adn_id, 0.0) + coef
        return self

    def add(self, other: "AffineExpr", scale: float = 1.0) -> "AffineExpr":
        for name, a in other.coeffs.items():
            self.term(name, scale * a)
        self.const += scale * other.const
        for column, a in other.loadings.items():
            self.load(column, scale * a)
        for adn_id, a in other.dp.items():
            self.regulate(adn_id, scale * a)
        return self

    def scaled(self, factor: float) -> "AffineExpr":
        return AffineExpr().add(self, factor)

    def certain(self) -> "AffineExpr":
        """Base case: zero forecast error and no regulation exchange"""
        return AffineExpr(dict(self.coeffs), self.const)


def linearize_circle(p_expr: AffineExpr, q_expr: AffineExpr, s: float, k_segments: int) -> List[Tuple[AffineExpr, float]]:
    """2K half-planes -S <= cos(k pi/K) P + sin(k pi/K) Q <= S, returned as (lhs, S) pairs of lhs <= S"""
    if k_segments < 2:
        raise ModelBuildError(f"circle linearization needs at least 2 segments, got {k_segments}")
    rows = []
    for k in range(1, k_segments + 1):
        angle = k * math.pi / k_segments
        c, sn = math.cos(angle), math.sin(angle)
        c = 0.0 if abs(c) < COEF_TOL else c
        sn = 0.0 if abs(sn) < COEF_TOL else sn
        side = AffineExpr().add(p_expr, c).add(q_expr, sn)
        rows.append((side, s))
        rows.append((side.scaled(-1.0), s))
    return rows


@dataclass(frozen=True)
class ConsensusLayout:
    """Global ordering of the shared boundary quantities: per ADN, per period, per field"""
    adn_ids: Tuple[int, ...]
    horizon: int
    segments: int

    @property
    def fields(self) -> List[str]:
        return ["p", "q", "h", "d"] + [f"m{m + 1}" for m in range(self.segments)] + ["ru", "rd"]

    def entries(self, adn_id: Optional[int] = None) -> List[Tuple[int, str, int]]:
        ids = self.adn_ids if adn_id is None else (adn_id,)
        return [(b, f, t) for b in ids for t in range(self.horizon) for f in self.fields]

    def keys(self, adn_id: Optional[int] = None) -> List[str]:
        return [self.key(b, f, t) for b, f, t in self.entries(adn_id)]

    def __len__(self) -> int:
        return len(self.adn_ids) * self.horizon * len(self.fields)

    @staticmethod
    def key(adn_id: int, name: str, period: int) -> str:
        return f"adn{adn_id}.{name}@{period}"

    @staticmethod
    def tps_name(adn_id: int, name: str, period: int) -> str:
        return f"tps.z.adn{adn_id}.{name}@{period}"

    @staticmethod
    def adn_name(adn_id: int, name: str, period: int) -> str:
        return f"adn{adn_id}.y.{name}@{period}"


@dataclass
class ConsensusTerms:
    """ADMM augmentation lambda.(x - ybar) + rho ||x - ybar||^2 keyed by layout key"""
    lam: Dict[str, float]
    ybar: Dict[str, float]
    rho: float


@dataclass
class ModelArtifacts:
    """Everything the builders need besides the case itself"""
    case: ItdCase
    scenarios: ScenarioSet
    sensitivities: Dict[str, SensitivityBundle]
    margin: PwlMarginFit
    bounds: Dict[str, DisturbanceBounds]
    circle_segments: int = 8
    fuel_segments: int = 4

    @property
    def layout(self) -> ConsensusLayout:
        return ConsensusLayout(tuple(self.case.adn_ids), self.case.horizon, len(self.margin.segments))

    @property
    def supports(self) -> Dict[str, Tuple[float, float]]:
        return {
            column_name(s.id, t): s.centered_support
            for s in self.case.uncertainty.sources for t in range(self.case.horizon)
        }

    def worst_case(self, regions: Optional[Sequence[str]] = None) -> float:
        chosen = self.bounds if regions is None else {r: self.bounds[r] for r in regions}
        return worst_case_rhs(chosen)


def _warm_point(region: RegionData):
    network = region.network
    demand = region.demand(0)
    reactive = region.reactive_demand(0)
    p = np.array([-demand[b] for b in network.bus_ids])
    q = np.array([-reactive[b] for b in network.bus_ids])
    return solve_ac_powerflow(network, p, q)


def prepare_artifacts(
    case: ItdCase,
    scenarios: ScenarioSet,
    margin: Optional[PwlMarginFit] = None,
    warm: bool = False,
) -> ModelArtifacts:
    """Sensitivities per region, the system PWL margin fit and disturbance bounds"""
    if scenarios.horizon < case.horizon:
        raise ModelBuildError(f"scenario set covers {scenarios.horizon} periods, case needs {case.horizon}")
    expected = {column_name(s.id, t) for s in case.uncertainty.sources for t in range(case.horizon)}
    missing = expected - set(scenarios.columns)
    if missing:
        raise ModelBuildError(f"scenario set lacks columns {sorted(missing)[:5]}")

    settings = get_settings()
    sensitivities = {}
    for name, region in case.regions.items():
        point = None
        if warm:
            try:
                point = _warm_point(region)
            except (PowerFlowError, SingularJacobianError) as e:
                logger.warning(f"⚠️ warm linearization of {name} failed, using flat start: {e}")
        sensitivities[name] = build_sensitivities(region.network, point)
    return ModelArtifacts(
        case=case,
        scenarios=scenarios,
        sensitivities=sensitivities,
        margin=margin or fit_case_margin(case),
        bounds=case_bounds(case),
        circle_segments=settings.circle_segments,
        fuel_segments=settings.fuel_segments,
    )


@dataclass
class RegionProgram:
    """One region's program plus what the coordinator needs to drive it"""
    region: str
    program: MathProgram
    blocks: List[JccBlock] = field(default_factory=list)
    consensus_names: List[str] = field(default_factory=list)
    consensus_keys: List[str] = field(default_factory=list)

    @property
    def indicator_names(self) -> List[str]:
        return [name for block in self.blocks for name in block.indicators.values()]

    @property
    def groups(self) -> List[str]:
        return sorted(self.program.cost_groups)


def var_name(region: str, unit: str, name: str, period: int) -> str:
    return f"{region}.{unit}.{name}@{period}"


class _RegionModel:
    """Variables, nodal injection expressions and row helpers of one region"""

    def __init__(self, artifacts: ModelArtifacts, region: str, program: MathProgram, frequency_support: bool = True):
        self.art = artifacts
        self.case = artifacts.case
        self.region = region
        self.data = self.case.regions[region]
        self.program = program
        self.freq = self.case.frequency
        self.levels = self.case.levels
        self.sens = artifacts.sensitivities[region]
        # 0 pins IBR inertia and droop of a region that does not offer frequency support
        self.support = 1.0 if frequency_support else 0.0
        self.blocks: List[JccBlock] = []
        # adn_id -> (reserve-up var, reserve-down var, disturbance bounds of that ADN)
        self.envelopes: Dict[int, Tuple[str, str, DisturbanceBounds]] = {}
        horizon = self.case.horizon
        buses = self.data.network.bus_ids
        self.p_inj = [{b: AffineExpr() for b in buses} for _ in range(horizon)]
        self.q_inj = [{b: AffineExpr() for b in buses} for _ in range(horizon)]
        self.pfr = [{b: AffineExpr() for b in buses} for _ in range(horizon)]
        self.ibr_h: List[List[str]] = [[] for _ in range(horizon)]
        self.ibr_d: List[List[str]] = [[] for _ in range(horizon)]
        self.reserve_up: List[List[str]] = [[] for _ in range(horizon)]
        self.reserve_dn: List[List[str]] = [[] for _ in range(horizon)]

    @property
    def renewable_group(self) -> str:
        return f"{self.region}.W" if self.region == "tps" else f"{self.region}.PV"

    def name(self, unit: str, kind: str, t: int) -> str:
        return var_name(self.region, unit, kind, t)

    def var(self, unit: str, kind: str, t: int, lb: float = 0.0, ub: float = math.inf,
            cost: float = 0.0, group: Optional[str] = None) -> str:
        name = self.name(unit, kind, t)
        self.program.add_var(name, lb, ub, cost=cost, group=group)
        return name

    def ibr_reserve(self, h: str, d: str) -> AffineExpr:
        """Headroom an IBR holds for its inertia and droop response"""
        return AffineExpr().term(h, 2.0 * self.freq.rocof_max).term(d, self.freq.nadir_max)

    def disturbance(self, t: int) -> AffineExpr:
        expr = AffineExpr()
        for source in self.case.uncertainty.for_region(self.region, SourceKind.DEMAND):
            expr.load(column_name(source.id, t))
        return expr

    # rows

    def constrain(self, expr: AffineExpr, sense: Sense, rhs: float, label: str):
        """Deterministic row; expr must carry no scenario or regulation terms"""
        if expr.loadings or expr.dp:
            raise ModelBuildError(f"{label}: uncertain terms in a deterministic row")
        coeffs = {self.program.index(v): a for v, a in expr.coeffs.items() if abs(a) > COEF_TOL}
        bound = rhs - expr.const
        if not coeffs:
            satisfied = {Sense.LE: 0.0 <= bound + 1e-9, Sense.GE: 0.0 >= bound - 1e-9,
                         Sense.EQ: abs(bound) <= 1e-9}[sense]
            if satisfied:
                return
            logger.warning(f"⚠️ {self.program.name}: constant row {label} cannot hold")
        self.program.add_row(coeffs, sense, bound, label)

    def resolve(self, expr: AffineExpr) -> AffineExpr:
        """Replace dp_b by the envelope end maximizing the expression"""
        out = AffineExpr(dict(expr.coeffs), expr.const, dict(expr.loadings))
        for adn_id, c in expr.dp.items():
            if abs(c) <= COEF_TOL:
                continue
            if adn_id not in self.envelopes:
                raise ModelBuildError(f"{self.region}: no regulation envelope for ADN {adn_id}")
            up, dn, bounds = self.envelopes[adn_id]
            if c >= 0:
                # dp_b <= R^u - zeta_min
                out.term(up, c)
                out.const -= c * bounds.zeta_min
            else:
                # dp_b >= -(R^d + zeta_max)
                out.term(dn, -c)
                out.const -= c * bounds.zeta_max
        return out

    def uncertain(self, expr: AffineExpr, rhs: float, label: str) -> UncertainRow:
        resolved = self.resolve(expr)
        coeffs = {v: a for v, a in resolved.coeffs.items() if abs(a) > COEF_TOL}
        loadings = {c: a for c, a in resolved.loadings.items() if abs(a) > COEF_TOL}
        return UncertainRow(label, coeffs, rhs - resolved.const, loadings)

    def attach(self, rows: List[UncertainRow], delta: float, name: str):
        if not rows:
            return
        if delta == 0.0:
            block = attach_robust(self.program, rows, self.art.supports, self.art.scenarios.n, name)
        else:
            families = [row.family(self.art.scenarios) for row in rows]
            block = attach_families(
                self.program, families, self.art.scenarios.n, delta, name, uncertain_generator(rows),
            )
        self.blocks.append(block)

    # devices

    def add_demand(self, t: int):
        demand = self.data.demand(t)
        reactive = self.data.reactive_demand(t)
        for bus in self.data.network.bus_ids:
            self.p_inj[t][bus].const -= demand[bus]
            self.q_inj[t][bus].const -= reactive[bus]
        for source in self.case.uncertainty.for_region(self.region, SourceKind.DEMAND):
            self.p_inj[t][int(source.target)].load(column_name(source.id, t), -1.0)

    def add_thermal(self, t: int, deployment: AffineExpr, pfr_floor: bool):
        """Base points, SFR reserves with alpha-share deployment, fuel segments"""
        units = self.data.thermal
        if not units:
            return
        group = f"{self.region}.G"
        reserve_total_up = AffineExpr()
        reserve_total_dn = AffineExpr()
        for g in units:
            span = g.p_max - g.p_min
            cap = min(g.ramp, span)
            p = self.var(g.id, "p", t, g.p_min, g.p_max)
            q = self.var(g.id, "q", t, g.q_min, g.q_max)
            ru = self.var(g.id, "ru", t, 0.0, cap, g.reserve_cost_up, group)
            rd = self.var(g.id, "rd", t, 0.0, cap, g.reserve_cost_down, group)
            self.reserve_up[t].append(ru)
            self.reserve_dn[t].append(rd)
            reserve_total_up.term(ru)
            reserve_total_dn.term(rd)
            self.constrain(AffineExpr().term(p).term(ru), Sense.LE, g.p_max, f"{p}.headroom")
            self.constrain(AffineExpr().term(p).term(rd, -1.0), Sense.GE, g.p_min, f"{p}.footroom")
            if pfr_floor:
                floor = self.freq.qss_max / g.droop_R
                self.constrain(AffineExpr().term(ru), Sense.GE, floor, f"{ru}.pfr")
                self.constrain(AffineExpr().term(rd), Sense.GE, floor, f"{rd}.pfr")
            if t > 0 and math.isfinite(g.ramp):
                step = AffineExpr().term(p).term(self.name(g.id, "p", t - 1), -1.0)
                self.constrain(step, Sense.LE, g.ramp, f"{p}.ramp_up")
                self.constrain(step, Sense.GE, -g.ramp, f"{p}.ramp_dn")
            self._fuel(g, p, t, group)
            self.p_inj[t][g.bus].term(p).add(deployment, g.agc_factor)
            self.q_inj[t][g.bus].term(q)
            pfr = thermal_pfr(g.droop_R, g.pfr_cap, span, self.freq)
            # keeps p_max - P_g at or above the PFR power, so min(.., p_max - P_g) is this constant
            self.constrain(AffineExpr().term(p), Sense.LE, g.p_max - pfr, f"{p}.pfr_headroom")
            self.pfr[t][g.bus].const += pfr
        for g, ru, rd in zip(units, self.reserve_up[t], self.reserve_dn[t]):
            share_up = AffineExpr().term(ru).add(reserve_total_up, -g.agc_factor)
            share_dn = AffineExpr().term(rd).add(reserve_total_dn, -g.agc_factor)
            self.constrain(share_up, Sense.GE, 0.0, f"{ru}.share")
            self.constrain(share_dn, Sense.GE, 0.0, f"{rd}.share")

    def _fuel(self, g, p: str, t: int, group: str):
        segments = self.art.fuel_segments
        self.program.add_constant(g.fuel_cost(g.p_min), group)
        width = (g.p_max - g.p_min) / segments
        if width <= 0:
            return
        link = AffineExpr().term(p)
        for s in range(segments):
            lo = g.p_min + s * width
            slope = (g.fuel_cost(lo + width) - g.fuel_cost(lo)) / width
            link.term(self.var(g.id, f"seg{s}", t, 0.0, width, slope, group), -1.0)
        self.constrain(link, Sense.EQ, g.p_min, f"{p}.segments")

    def add_renewables(self, t: int):
        """Dispatchable IBR base points, inertia/droop settings and spillage expectation"""
        units = self.data.renewables
        if not units:
            return
        available = renewable_outputs(self.art.scenarios, self.case, self.region, t)
        n = self.art.scenarios.n
        coeffs = {}
        for w in units:
            forecast = self.data.forecast(w, t)
            p = self.var(w.id, "p", t, 0.0, forecast)
            q = self.var(w.id, "q", t, w.q_min, w.q_max)
            h = self.var(w.id, "h", t, 0.0, w.h_max * self.support)
            d = self.var(w.id, "d", t, 0.0, w.d_max * self.support)
            reserve = self.ibr_reserve(h, d)
            self.constrain(AffineExpr().term(p).add(reserve, -1.0), Sense.GE, 0.0, f"{p}.pfr_dn")
            coeffs[w.id] = AffineExpr().term(p).add(reserve).coeffs
            self.ibr_h[t].append(h)
            self.ibr_d[t].append(d)
            self.p_inj[t][w.bus].term(p)
            self.q_inj[t][w.bus].term(q)
            self.pfr[t][w.bus].add(reserve)

            # E[max(P~ - P, 0)] as the max over the pieces of its sorted-sample form
            spill = self.var(w.id, "spill", t, 0.0, math.inf, w.curtail_cost, self.renewable_group)
            ordered = np.sort(available[w.id])
            tails = np.cumsum(ordered[::-1])[::-1]
            for j in range(n):
                if j and ordered[j] == ordered[j - 1]:
                    continue
                piece = AffineExpr().term(spill).term(p, (n - j) / n)
                self.constrain(piece, Sense.GE, float(tails[j]) / n, f"{spill}.piece{j}")

        region, case = self.region, self.case

        def generator(scenarios: ScenarioSet) -> List[RowFamily]:
            outputs = renewable_outputs(scenarios, case, region, t)
            return [RowFamily(w.id, coeffs[w.id], outputs[w.id]) for w in units]

        block = attach_families(
            self.program, generator(self.art.scenarios), n, self.levels.delta_ibr,
            f"{self.region}.IBR@{t}", generator,
        )
        self.blocks.append(block)

    def add_storage(self, t: int):
        group = f"{self.region}.E"
        for e in self.data.storage:
            pc = self.var(e.id, "pc", t, 0.0, e.p_charge_max, e.loss_cost * (1.0 - e.eff_charge), group)
            pd = self.var(e.id, "pd", t, 0.0, e.p_discharge_max, e.loss_cost * (1.0 / e.eff_discharge - 1.0), group)
            energy = self.var(e.id, "e", t, e.soc_min * e.energy_cap, e.soc_max * e.energy_cap)
            h = self.var(e.id, "h", t, 0.0, e.h_max * self.support)
            d = self.var(e.id, "d", t, 0.0, e.d_max * self.support)
            span = e.p_charge_max + e.p_discharge_max
            ru = self.var(e.id, "ru", t, 0.0, span, e.reserve_cost_up, group)
            rd = self.var(e.id, "rd", t, 0.0, span, e.reserve_cost_down, group)
            reserve = self.ibr_reserve(h, d)

            soc = AffineExpr().term(energy).term(pc, -e.eff_charge * self.case.dt).term(pd, self.case.dt / e.eff_discharge)
            if t == 0:
                self.constrain(soc, Sense.EQ, e.soc_init * e.energy_cap, f"{energy}.soc")
            else:
                self.constrain(soc.term(self.name(e.id, "e", t - 1), -1.0), Sense.EQ, 0.0, f"{energy}.soc")
            self.constrain(AffineExpr().term(ru).add(reserve, -1.0), Sense.GE, 0.0, f"{ru}.pfr")
            self.constrain(AffineExpr().term(rd).add(reserve, -1.0), Sense.GE, 0.0, f"{rd}.pfr")
            self.constrain(AffineExpr().term(ru).term(pd).term(pc, -1.0), Sense.LE, e.p_discharge_max, f"{ru}.headroom")
            self.constrain(AffineExpr().term(rd).term(pc).term(pd, -1.0), Sense.LE, e.p_charge_max, f"{rd}.headroom")

            self.ibr_h[t].append(h)
            self.ibr_d[t].append(d)
            self.p_inj[t][e.bus].term(pd).term(pc, -1.0)
            self.pfr[t][e.bus].add(reserve)

    def add_compensators(self, t: int):
        for c in self.data.compensators:
            q = self.var(c.id, "q", t, c.q_min, c.q_max)
            self.q_inj[t][c.bus].term(q)

    def add_balance(self, t: int, reactive: bool):
        total_p = AffineExpr()
        for expr in self.p_inj[t].values():
            total_p.add(expr.certain())
        self.constrain(total_p, Sense.EQ, 0.0, f"{self.region}.balance_p@{t}")
        if reactive:
            total_q = AffineExpr()
            for expr in self.q_inj[t].values():
                total_q.add(expr.certain())
            self.constrain(total_q, Sense.EQ, 0.0, f"{self.region}.balance_q@{t}")

    # network

    def _linear_map(self, mp: np.ndarray, mq: np.ndarray, base: np.ndarray, t: int) -> List[AffineExpr]:
        sens = self.sens
        p0, q0 = sens.point.p_inj, sens.point.q_inj
        exprs = []
        for i in range(mp.shape[0]):
            expr = AffineExpr(const=float(base[i] - mp[i] @ p0 - mq[i] @ q0))
            for k, bus in enumerate(sens.bus_ids):
                if abs(mp[i, k]) > COEF_TOL:
                    expr.add(self.p_inj[t][bus], float(mp[i, k]))
                if abs(mq[i, k]) > COEF_TOL:
                    expr.add(self.q_inj[t][bus], float(mq[i, k]))
            exprs.append(expr)
        return exprs

    def add_network_rows(self, t: int):
        """Base-case security rows, the voltage/angle JCC and the line-flow JCC"""
        sens = self.sens
        network = self.data.network
        theta = self._linear_map(sens.a_p, sens.a_q, sens.theta0, t)
        volts = self._linear_map(sens.b_p, sens.b_q, sens.v0, t)

        voltage_rows = []
        for i, bus_id in enumerate(sens.non_slack):
            bus = network.bus(bus_id)
            for expr, lo, hi, tag in ((volts[i], bus.v_min, bus.v_max, "v"),
                                      (theta[i], bus.theta_min, bus.theta_max, "theta")):
                label = f"{self.region}.{tag}{bus_id}@{t}"
                self.constrain(expr.certain(), Sense.LE, hi, f"{label}.max")
                self.constrain(expr.certain(), Sense.GE, lo, f"{label}.min")
                voltage_rows.append(self.uncertain(expr, hi, f"{tag}{bus_id}.max"))
                voltage_rows.append(self.uncertain(expr.scaled(-1.0), -lo, f"{tag}{bus_id}.min"))
        self.attach(voltage_rows, self.levels.delta_v, f"{self.region}.V@{t}")

        flows_p = self._linear_map(sens.f_p, sens.f_q, sens.flow_p0, t)
        flows_q = self._linear_map(sens.fq_p, sens.fq_q, sens.flow_q0, t) if self.region != "tps" else []
        line_rows = []
        for l, branch in enumerate(network.branches):
            if not math.isfinite(branch.flow_limit):
                continue
            label = f"{self.region}.line{branch.key}@{t}"
            if self.region == "tps":
                sides = [(flows_p[l], branch.flow_limit), (flows_p[l].scaled(-1.0), branch.flow_limit)]
            else:
                sides = linearize_circle(flows_p[l], flows_q[l], branch.flow_limit, self.art.circle_segments)
            for k, (lhs, limit) in enumerate(sides):
                self.constrain(lhs.certain(), Sense.LE, limit, f"{label}.{k}")
                line_rows.append(self.uncertain(lhs, limit, f"line{branch.key}.{k}"))
        self.attach(line_rows, self.levels.delta_line, f"{self.region}.L@{t}")

    def add_pfr_rows(self, t: int):
        """Voltage and angle excursions of the worst-case PFR injection stay in their windows"""
        sens = self.sens
        for matrix, limit, tag in ((sens.s_v, self.freq.pfr_dv_max, "dv"),
                                   (sens.s_theta, self.freq.pfr_dtheta_max, "dtheta")):
            for i, bus_id in enumerate(sens.non_slack):
                change = AffineExpr()
                for k, bus in enumerate(sens.bus_ids):
                    if abs(matrix[i, k]) > COEF_TOL:
                        change.add(self.pfr[t][bus], float(matrix[i, k]))
                label = f"{self.region}.pfr_{tag}{bus_id}@{t}"
                self.constrain(change, Sense.LE, limit, f"{label}.max")
                self.constrain(change, Sense.GE, -limit, f"{label}.min")

    def add_boundary_rows(self, adn_id: int, p: str, q: str, dp_sign: float, capacity: float, t: int):
        """Base exchange and the exchange after regulation stay within the link capacity"""
        segments = self.art.circle_segments
        label = f"{self.region}.boundary{adn_id}@{t}"
        base = linearize_circle(AffineExpr().term(p), AffineExpr().term(q), capacity, segments)
        for k, (lhs, limit) in enumerate(base):
            self.constrain(lhs, Sense.LE, limit, f"{label}.base{k}")
        if adn_id not in self.envelopes:
            return
        shifted = AffineExpr().term(p).regulate(adn_id, dp_sign)
        for k, (lhs, limit) in enumerate(linearize_circle(shifted, AffineExpr().term(q), capacity, segments)):
            self.constrain(self.resolve(lhs), Sense.LE, limit, f"{label}.sfr{k}")


def _quantiles(samples: np.ndarray, delta: float, bounds: DisturbanceBounds) -> Tuple[float, float]:
    """(upper, lower) disturbance quantiles at delta/2; delta = 0 falls back to the supports"""
    level = delta / 2.0
    if level <= 0.0:
        return bounds.zeta_max, bounds.zeta_min
    return empirical_quantile(samples, level, "upper"), empirical_quantile(samples, level, "lower")


def _consensus_bounds(artifacts: ModelArtifacts, adn_id: int, name: str) -> Tuple[float, float]:
    case = artifacts.case
    region = case.adn(adn_id).region
    if name in ("p", "q"):
        capacity = case.link(adn_id).capacity
        return -capacity, capacity
    if name == "h":
        return 0.0, region.ibr_h_cap
    if name == "d":
        return 0.0, region.ibr_d_cap
    if name in ("ru", "rd"):
        return 0.0, sum(min(g.ramp, g.p_max - g.p_min) for g in region.thermal)
    m = int(name[1:]) - 1
    corners = [
        artifacts.margin.plane(m, h, d, include_constant=False)
        for h in (0.0, region.ibr_h_cap) for d in (0.0, region.ibr_d_cap)
    ]
    return min(corners), max(corners)


def apply_consensus_terms(
    program: MathProgram,
    names: Sequence[str],
    keys: Sequence[str],
    terms: ConsensusTerms,
) -> MathProgram:
    """Copy of the program with the ADMM multiplier and proximal terms"""
    augmented = program.copy()
    for name, key in zip(names, keys):
        j = augmented.index(name)
        lam = terms.lam.get(key, 0.0)
        center = terms.ybar[key]
        augmented.add_cost(j, lam)
        augmented.add_constant(-lam * center)
        augmented.add_quadratic(j, terms.rho, center)
    return augmented


def _finish(region: str, program: MathProgram, model: _RegionModel, names: List[str],
            keys: List[str], terms: Optional[ConsensusTerms]) -> RegionProgram:
    if terms is not None:
        program = apply_consensus_terms(program, names, keys, terms)
    logger.debug(
        f"Built {program.name}: {program.n_vars} vars, {len(program.rows)} rows, "
        f"{len(program.integers)} binaries"
    )
    return RegionProgram(region, program, model.blocks, names, keys)


def build_tps_fcsed(
    artifacts: ModelArtifacts,
    consensus_terms: Optional[ConsensusTerms] = None,
    coordinated: bool = True,
) -> RegionProgram:
    """TPS subproblem over its own variables and its copy z of the consensus vector"""
    case = artifacts.case
    layout = artifacts.layout
    program = MathProgram("tps" if coordinated else "ifc-tps")
    model = _RegionModel(artifacts, "tps", program)
    consensus: Dict[Tuple[int, str, int], str] = {}
    regions = None if coordinated else ["tps"]
    worst = artifacts.worst_case(regions)

    for t in range(case.horizon):
        model.add_demand(t)
        model.add_renewables(t)
        model.add_storage(t)
        deployment = model.disturbance(t)
        for link in case.links:
            b = link.adn_id
            if coordinated:
                for name in layout.fields:
                    z = layout.tps_name(b, name, t)
                    lb, ub = _consensus_bounds(artifacts, b, name)
                    program.add_var(z, lb, ub)
                    consensus[(b, name, t)] = z
                z_p, z_q = consensus[(b, "p", t)], consensus[(b, "q", t)]
                model.envelopes[b] = (consensus[(b, "ru", t)], consensus[(b, "rd", t)],
                                      artifacts.bounds[region_name(b)])
                # dp_b > 0: the ADN supports the TPS and the import of the ADN drops
                model.p_inj[t][link.tps_bus].term(z_p, -1.0).regulate(b, 1.0)
                model.q_inj[t][link.tps_bus].term(z_q, -1.0)
                deployment.regulate(b, -1.0)
                model.add_boundary_rows(b, z_p, z_q, -1.0, link.capacity, t)
            else:
                adn = case.adn(b).region
                model.p_inj[t][link.tps_bus].const -= sum(adn.demand(t).values())
                model.q_inj[t][link.tps_bus].const -= sum(adn.reactive_demand(t).values())
        model.add_thermal(t, deployment, pfr_floor=worst > 0)
        model.add_balance(t, reactive=False)
        model.add_network_rows(t)
        model.add_pfr_rows(t)
        _add_frequency_coupling(artifacts, model, consensus, worst, t)

    names = [consensus[e] for e in layout.entries()] if coordinated else []
    keys = layout.keys() if coordinated else []
    logger.info(f"✅ TPS FC-SED built ({program.n_vars} vars, {len(program.integers)} binaries, W={worst:.4f} p.u.)")
    return _finish("tps", program, model, names, keys, consensus_terms)


def _add_frequency_coupling(
    artifacts: ModelArtifacts,
    model: _RegionModel,
    consensus: Mapping[Tuple[int, str, int], str],
    worst: float,
    t: int,
):
    """Worst-case RoCoF, steady-state and nadir rows plus the SFR reserve quantile rows"""
    case = artifacts.case
    freq = case.frequency
    margin = artifacts.margin
    adn_ids = sorted({b for b, _, period in consensus if period == t})

    def regional(field_name: str) -> AffineExpr:
        expr = AffineExpr()
        for b in adn_ids:
            expr.term(consensus[(b, field_name, t)])
        return expr

    if worst > 0:
        inertia = AffineExpr(const=freq.h_thermal).add(regional("h"))
        for h in model.ibr_h[t]:
            inertia.term(h)
        model.constrain(inertia, Sense.GE, worst / (2.0 * freq.rocof_max), f"tps.rocof@{t}")

        damping = AffineExpr(const=freq.damping + 1.0 / freq.governor.r_g).add(regional("d"))
        for d in model.ibr_d[t]:
            damping.term(d)
        model.constrain(damping, Sense.GE, worst / freq.qss_max, f"tps.qss@{t}")

        for m, (c, bh, bd) in enumerate(margin.segments):
            plane = AffineExpr(const=margin.nadir_limit * c).add(regional(f"m{m + 1}"))
            for h in model.ibr_h[t]:
                plane.term(h, margin.nadir_limit * bh)
            for d in model.ibr_d[t]:
                plane.term(d, margin.nadir_limit * bd)
            model.constrain(plane, Sense.GE, worst, f"tps.nadir{m + 1}@{t}")

    up_q, dn_q = _quantiles(
        artifacts.scenarios.region_sum("tps", t), case.levels.delta_sfr, artifacts.bounds["tps"],
    )
    up = AffineExpr().add(regional("ru"))
    dn = AffineExpr().add(regional("rd"))
    for b in adn_ids:
        bounds = artifacts.bounds[region_name(b)]
        up.const -= bounds.zeta_max
        dn.const += bounds.zeta_min
    for ru in model.reserve_up[t]:
        up.term(ru)
    for rd in model.reserve_dn[t]:
        dn.term(rd)
    model.constrain(up, Sense.GE, max(up_q, 0.0), f"tps.sfr_up@{t}")
    model.constrain(dn, Sense.GE, -min(dn_q, 0.0), f"tps.sfr_dn@{t}")


def build_adn_fcsed(
    artifacts: ModelArtifacts,
    adn_id: int,
    consensus_terms: Optional[ConsensusTerms] = None,
    coordinated: bool = True,
    pin: Optional[Mapping[int, Tuple[float, float]]] = None,
) -> RegionProgram:
    """ADN subproblem over its own variables and its copy y of its consensus slice"""
    case = artifacts.case
    layout = artifacts.layout
    region = region_name(adn_id)
    link = case.link(adn_id)
    data = case.adn(adn_id).region
    if link.adn_root_bus != data.network.slack:
        raise ModelBuildError(f"{region}: root bus {link.adn_root_bus} is not the slack bus")
    program = MathProgram(region if coordinated else f"ifc-{region}")
    model = _RegionModel(artifacts, region, program, frequency_support=coordinated)
    margin = artifacts.margin
    own_bounds = artifacts.bounds[region]
    worst = artifacts.worst_case() if coordinated else artifacts.worst_case([region])
    consensus: Dict[Tuple[str, int], str] = {}

    for t in range(case.horizon):
        fields = layout.fields if coordinated else ["p", "q", "ru", "rd"]
        for name in fields:
            y = layout.adn_name(adn_id, name, t)
            lb, ub = _consensus_bounds(artifacts, adn_id, name)
            if pin is not None and t in pin and name in ("p", "q"):
                lb = ub = pin[t][0] if name == "p" else pin[t][1]
            program.add_var(y, lb, ub)
            consensus[(name, t)] = y
        y_p, y_q = consensus[("p", t)], consensus[("q", t)]

        model.add_demand(t)
        model.add_renewables(t)
        model.add_storage(t)
        model.add_compensators(t)
        deployment = model.disturbance(t)
        if coordinated:
            model.envelopes[adn_id] = (consensus[("ru", t)], consensus[("rd", t)], own_bounds)
            deployment.regulate(adn_id, 1.0)
        model.add_thermal(t, deployment, pfr_floor=worst > 0)
        model.p_inj[t][link.adn_root_bus].term(y_p)
        model.q_inj[t][link.adn_root_bus].term(y_q)
        model.add_balance(t, reactive=True)

        for name, units in (("ru", model.reserve_up[t]), ("rd", model.reserve_dn[t])):
            total = AffineExpr().term(consensus[(name, t)])
            for r in units:
                total.term(r, -1.0)
            model.constrain(total, Sense.EQ, 0.0, f"{region}.{name}_total@{t}")

        if coordinated:
            for name, units in (("h", model.ibr_h[t]), ("d", model.ibr_d[t])):
                total = AffineExpr().term(consensus[(name, t)])
                for v in units:
                    total.term(v, -1.0)
                model.constrain(total, Sense.EQ, 0.0, f"{region}.{name}_total@{t}")
            for m, (_, bh, bd) in enumerate(margin.segments):
                plane = (AffineExpr().term(consensus[(f"m{m + 1}", t)])
                         .term(consensus[("h", t)], -margin.nadir_limit * bh)
                         .term(consensus[("d", t)], -margin.nadir_limit * bd))
                model.constrain(plane, Sense.EQ, 0.0, f"{region}.m{m + 1}_total@{t}")
        else:
            up_q, dn_q = _quantiles(
                artifacts.scenarios.region_sum(region, t), case.levels.delta_sfr, own_bounds,
            )
            model.constrain(AffineExpr().term(consensus[("ru", t)]), Sense.GE, max(up_q, 0.0), f"{region}.sfr_up@{t}")
            model.constrain(AffineExpr().term(consensus[("rd", t)]), Sense.GE, -min(dn_q, 0.0), f"{region}.sfr_dn@{t}")

        model.add_boundary_rows(adn_id, y_p, y_q, -1.0, link.capacity, t)
        model.add_network_rows(t)
        model.add_pfr_rows(t)

    names = [consensus[(f, t)] for _, f, t in layout.entries(adn_id)] if coordinated else []
    keys = layout.keys(adn_id) if coordinated else []
    logger.info(f"✅ {region} FC-SED built ({program.n_vars} vars, {len(program.integers)} binaries)")
    return _finish(region, program, model, names, keys, consensus_terms)


def build_centralized(artifacts: ModelArtifacts) -> RegionProgram:
    """All regional programs in one MILP with z == y coupling rows"""
    tps = build_tps_fcsed(artifacts)
    adns = [build_adn_fcsed(artifacts, b) for b in artifacts.case.adn_ids]
    program = merge_programs("cfc-sed", [tps.program] + [a.program for a in adns])
    layout = artifacts.layout
    for b, name, t in layout.entries():
        z = program.index(layout.tps_name(b, name, t))
        y = program.index(layout.adn_name(b, name, t))
        program.add_row({z: 1.0, y: -1.0}, Sense.EQ, 0.0, f"couple.{layout.key(b, name, t)}")
    blocks = list(tps.blocks)
    for adn in adns:
        blocks.extend(adn.blocks)
    logger.info(
        f"✅ Centralized CFC-SED built ({program.n_vars} vars, {len(program.rows)} rows, "
        f"{len(program.integers)} binaries)"
    )
    return RegionProgram("itd", program, blocks)


def ifc_boundary(case: ItdCase, adn_id: int) -> Dict[int, Tuple[float, float]]:
    """Boundary exchange the independent TPS assumes: the ADN forecast demand"""
    data = case.adn(adn_id).region
    return {
        t: (sum(data.demand(t).values()), sum(data.reactive_demand(t).values()))
        for t in range(case.horizon)
    }


def build_ifc_variants(
    artifacts: ModelArtifacts,
    pins: Optional[Mapping[int, Mapping[int, Tuple[float, float]]]] = None,
) -> Dict[str, object]:
    """{'ifc_tps': RegionProgram, 'ifc_adn': {adn_id: RegionProgram}}"""
    pins = pins or {}
    return {
        "ifc_tps": build_tps_fcsed(artifacts, coordinated=False),
        "ifc_adn": {
            b: build_adn_fcsed(artifacts, b, coordinated=False, pin=pins.get(b))
            for b in artifacts.case.adn_ids
        },
    }
