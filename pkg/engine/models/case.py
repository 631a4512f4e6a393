"""
Static ITD case types
All quantities are per-unit on the case base once loaded; costs are k$ per
p.u. per dispatch period.
"""
import enum
import math
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field


class BusKind(str, enum.Enum):
    """Power-flow role of a bus"""
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"


class RenewableKind(str, enum.Enum):
    """Dispatchable windfarm (TPS) or dispatchable photovoltaic (ADN)"""
    DWF = "dwf"
    DPV = "dpv"


class SourceKind(str, enum.Enum):
    """What a forecast error perturbs"""
    DEMAND = "demand"
    DWF = "dwf"
    DPV = "dpv"


class CaseRecord(BaseModel):
    """Immutable base for case records"""
    model_config = ConfigDict(frozen=True, extra="forbid")


class BusRecord(CaseRecord):
    id: int
    kind: BusKind = BusKind.PQ
    p_demand: float = 0.0
    q_demand: float = 0.0
    v_min: float = 0.95
    v_max: float = 1.05
    theta_min: float = -0.5
    theta_max: float = 0.5


class BranchRecord(CaseRecord):
    from_bus: int
    to_bus: int
    r: float = 0.0
    x: float
    b_shunt: float = 0.0
    flow_limit: float = math.inf

    @property
    def key(self) -> str:
        return f"{self.from_bus}-{self.to_bus}"


class ThermalUnit(CaseRecord):
    id: str
    bus: int
    p_min: float = 0.0
    p_max: float
    q_min: float = 0.0
    q_max: float = 0.0
    ramp: float = math.inf
    cost_quadratic: float = 0.0
    cost_linear: float = 0.0
    cost_constant: float = 0.0
    reserve_cost_up: float = 0.0
    reserve_cost_down: float = 0.0
    agc_factor: float = 0.0
    droop_R: float = 1.0
    pfr_cap: float = math.inf

    def fuel_cost(self, p: float) -> float:
        """Quadratic fuel cost at base point p"""
        return self.cost_quadratic * p * p + self.cost_linear * p + self.cost_constant


class RenewableUnit(CaseRecord):
    id: str
    bus: int
    kind: RenewableKind
    forecast_max: float
    q_min: float = 0.0
    q_max: float = 0.0
    curtail_cost: float = 0.0
    h_max: float = 0.0
    d_max: float = 0.0


class StorageUnit(CaseRecord):
    id: str
    bus: int
    p_charge_max: float
    p_discharge_max: float
    energy_cap: float
    soc_init: float = 0.5
    soc_min: float = 0.1
    soc_max: float = 0.9
    eff_charge: float = 0.90
    eff_discharge: float = 0.95
    loss_cost: float = 0.0
    reserve_cost_up: float = 0.0
    reserve_cost_down: float = 0.0
    h_max: float = 0.0
    d_max: float = 0.0


class ReactiveCompensator(CaseRecord):
    id: str
    bus: int
    q_min: float = 0.0
    q_max: float = 0.0


class BoundaryLink(CaseRecord):
    tps_bus: int
    adn_id: int
    adn_root_bus: int
    capacity: float


class GovernorParams(CaseRecord):
    """Aggregated reheat-turbine governor of the thermal fleet"""
    r_g: float = Field(..., description="aggregated droop, Hz per p.u.")
    f_h: float = Field(..., description="high-pressure turbine fraction")
    t_r: float = Field(..., description="reheat time constant, s")


class FrequencyParams(CaseRecord):
    rocof_max: float = 0.5
    nadir_max: float = 0.5
    qss_max: float = 0.3
    f0: float = 50.0
    h_thermal: float
    damping: float
    governor: GovernorParams
    pfr_dv_max: float = 0.03
    pfr_dtheta_max: float = 0.2


class SignificanceLevels(CaseRecord):
    delta_v: float = 0.0
    delta_line: float = 0.05
    delta_ibr: float = 0.05
    delta_sfr: float = 0.05


class ForecastSource(CaseRecord):
    """One independently sampled forecast error"""
    id: str
    kind: SourceKind
    region: str
    target: str
    alpha: float = 2.0
    beta: float = 2.0
    lo: float
    hi: float

    @property
    def mean_shift(self) -> float:
        """Beta mean on the support; subtracted so the error is zero-mean"""
        return self.lo + (self.hi - self.lo) * self.alpha / (self.alpha + self.beta)

    @property
    def centered_support(self) -> tuple:
        shift = self.mean_shift
        return self.lo - shift, self.hi - shift


class ForecastErrorSpec(CaseRecord):
    sources: List[ForecastSource] = Field(default_factory=list)

    def for_region(self, region: str, kind: Optional[SourceKind] = None) -> List[ForecastSource]:
        return [
            s for s in self.sources
            if s.region == region and (kind is None or s.kind == kind)
        ]


class Network(CaseRecord):
    name: str
    base_mva: float = 100.0
    buses: List[BusRecord]
    branches: List[BranchRecord] = Field(default_factory=list)

    @property
    def slack(self) -> int:
        for bus in self.buses:
            if bus.kind == BusKind.SLACK:
                return bus.id
        raise ValueError(f"network {self.name} has no slack bus")

    @property
    def bus_ids(self) -> List[int]:
        return [b.id for b in self.buses]

    @property
    def bus_index(self) -> Dict[int, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @property
    def non_slack(self) -> List[int]:
        slack = self.slack
        return [b.id for b in self.buses if b.id != slack]

    def bus(self, bus_id: int) -> BusRecord:
        return self.buses[self.bus_index[bus_id]]


class RegionData(CaseRecord):
    name: str
    network: Network
    thermal: List[ThermalUnit] = Field(default_factory=list)
    renewables: List[RenewableUnit] = Field(default_factory=list)
    storage: List[StorageUnit] = Field(default_factory=list)
    compensators: List[ReactiveCompensator] = Field(default_factory=list)
    load_profile: List[float] = Field(default_factory=list)
    renewable_profile: List[float] = Field(default_factory=list)

    def load_factor(self, period: int) -> float:
        return self.load_profile[period] if period < len(self.load_profile) else 1.0

    def renewable_factor(self, period: int) -> float:
        return self.renewable_profile[period] if period < len(self.renewable_profile) else 1.0

    def demand(self, period: int) -> Dict[int, float]:
        factor = self.load_factor(period)
        return {b.id: b.p_demand * factor for b in self.network.buses}

    def reactive_demand(self, period: int) -> Dict[int, float]:
        # reactive demand is a fixed parameter
        return {b.id: b.q_demand for b in self.network.buses}

    def forecast(self, unit: RenewableUnit, period: int) -> float:
        return unit.forecast_max * self.renewable_factor(period)

    @property
    def ibr_h_cap(self) -> float:
        return sum(u.h_max for u in self.renewables) + sum(e.h_max for e in self.storage)

    @property
    def ibr_d_cap(self) -> float:
        return sum(u.d_max for u in self.renewables) + sum(e.d_max for e in self.storage)


class AdnData(CaseRecord):
    adn_id: int
    region: RegionData


class ItdCase(CaseRecord):
    name: str = "itd"
    base_mva: float = 100.0
    tps: RegionData
    adns: List[AdnData] = Field(default_factory=list)
    links: List[BoundaryLink] = Field(default_factory=list)
    frequency: FrequencyParams
    levels: SignificanceLevels = Field(default_factory=SignificanceLevels)
    horizon: int = 4
    dt: float = 0.25
    uncertainty: ForecastErrorSpec = Field(default_factory=ForecastErrorSpec)
    per_unit: bool = True

    def adn(self, adn_id: int) -> AdnData:
        for adn in self.adns:
            if adn.adn_id == adn_id:
                return adn
        raise KeyError(f"unknown ADN {adn_id}")

    def link(self, adn_id: int) -> BoundaryLink:
        for link in self.links:
            if link.adn_id == adn_id:
                return link
        raise KeyError(f"no boundary link for ADN {adn_id}")

    @property
    def adn_ids(self) -> List[int]:
        return [a.adn_id for a in self.adns]

    @property
    def regions(self) -> Dict[str, RegionData]:
        regions = {"tps": self.tps}
        for adn in self.adns:
            regions[region_name(adn.adn_id)] = adn.region
        return regions

    @property
    def ibr_h_cap(self) -> float:
        return sum(r.ibr_h_cap for r in self.regions.values())

    @property
    def ibr_d_cap(self) -> float:
        return sum(r.ibr_d_cap for r in self.regions.values())


class Diagnostic(BaseModel):
    """One violated case invariant"""
    entity: str
    invariant: str
    message: str

    def __str__(self) -> str:
        return f"{self.entity}: {self.message} [{self.invariant}]"


def region_name(adn_id: int) -> str:
    return f"adn{adn_id}"
