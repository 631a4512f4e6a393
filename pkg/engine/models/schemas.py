"""
Pydantic schemas for every JSON surface of the engine
"""
import enum
from datetime import datetime
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field

PROTOCOL_VERSION = 1


class LinearizationReport(BaseModel):
    """Per-bus / per-line linear power-flow errors against the AC oracle"""
    buses: List[int]
    lines: List[str]
    samples: int
    failures: int
    v_max_error: List[float]
    v_mean_error: List[float]
    theta_max_error: List[float]
    theta_mean_error: List[float]
    flow_max_error: List[float]
    flow_mean_error: List[float]

    @property
    def worst_voltage_error(self) -> float:
        return max(self.v_max_error, default=0.0)


class RunMode(str, enum.Enum):
    CENTRALIZED = "centralized"
    DISTRIBUTED = "distributed"
    IFC = "ifc"


class RunManifest(BaseModel):
    """Everything needed to reproduce a run"""
    command: str
    case_path: str
    case_hash: str
    seed: int
    scenarios: int
    mode: RunMode
    backend: str = "auto"
    overrides: Dict[str, Any] = Field(default_factory=dict)
    artifact_hashes: Dict[str, str] = Field(default_factory=dict)


class UnitDispatch(BaseModel):
    """Base point, reserves and inverter settings of one unit in one period"""
    region: str
    unit: str
    kind: str
    p: float = 0.0
    q: float = 0.0
    r_up: float = 0.0
    r_dn: float = 0.0
    h: float = 0.0
    d: float = 0.0
    curtailment: float = 0.0
    p_charge: float = 0.0
    p_discharge: float = 0.0
    energy: float = 0.0


class BoundaryDispatch(BaseModel):
    """Boundary exchange as decided by each side"""
    adn_id: int
    p_tps: float
    q_tps: float
    p_adn: Optional[float] = None
    q_adn: Optional[float] = None
    consensus_tps: Dict[str, float] = Field(default_factory=dict)
    consensus_adn: Dict[str, float] = Field(default_factory=dict)

    @property
    def p_mismatch(self) -> float:
        return 0.0 if self.p_adn is None else abs(self.p_tps - self.p_adn)


class PeriodDispatch(BaseModel):
    period: int
    units: List[UnitDispatch] = Field(default_factory=list)
    boundaries: List[BoundaryDispatch] = Field(default_factory=list)
    ibr_h_total: float = 0.0
    ibr_d_total: float = 0.0
    thermal_r_up: float = 0.0
    thermal_r_dn: float = 0.0

    def unit(self, region: str, unit_id: str) -> UnitDispatch:
        for record in self.units:
            if record.region == region and record.unit == unit_id:
                return record
        raise KeyError(f"no dispatch for {region}.{unit_id}")

    def boundary(self, adn_id: int) -> BoundaryDispatch:
        for record in self.boundaries:
            if record.adn_id == adn_id:
                return record
        raise KeyError(f"no boundary dispatch for ADN {adn_id}")


class AuditBlockReport(BaseModel):
    name: str
    delta: float
    budget: int
    robust: bool = False
    training_scenarios: int
    training_rate: float
    fresh_scenarios: int
    fresh_rate: float
    interval_low: float
    interval_high: float
    indicators_used: int = 0


class AuditReport(BaseModel):
    blocks: List[AuditBlockReport] = Field(default_factory=list)

    def block(self, name: str) -> AuditBlockReport:
        for report in self.blocks:
            if report.name == name:
                return report
        raise KeyError(name)


class RegionReport(BaseModel):
    """What one region contributes to a dispatch result"""
    region: str
    periods: List[List[UnitDispatch]] = Field(default_factory=list)
    cost_groups: Dict[str, float] = Field(default_factory=dict)
    boundary: Dict[str, float] = Field(default_factory=dict)
    indicators: Dict[str, List[int]] = Field(default_factory=dict)
    values: Dict[str, float] = Field(default_factory=dict)

    @property
    def objective(self) -> float:
        return sum(self.cost_groups.values())


class HistoryRecord(BaseModel):
    """One outer-layer ADMM iteration"""
    k: int
    gap_t: float
    gap_d: float
    obj_t: float
    obj_d_total: float
    outer: int = 0


class DispatchResult(BaseModel):
    """Results file of one solve"""
    mode: RunMode
    case_name: str
    case_hash: str = ""
    base_mva: float = 100.0
    objective: float
    cost_groups: Dict[str, float] = Field(default_factory=dict)
    periods: List[PeriodDispatch] = Field(default_factory=list)
    consensus: Dict[str, float] = Field(default_factory=dict)
    indicators: Dict[str, List[int]] = Field(default_factory=dict)
    converged: bool = True
    outer_iterations: int = 0
    admm_iterations: int = 0
    optimal_error_pct: Optional[float] = None
    history: List[HistoryRecord] = Field(default_factory=list)
    audit: Optional[AuditReport] = None
    manifest: Optional[RunManifest] = None
    generated_at: Optional[datetime] = None

    def period(self, t: int) -> PeriodDispatch:
        return self.periods[t]


class EnvelopeKind(str, enum.Enum):
    HELLO = "HELLO"
    PROPOSAL = "PROPOSAL"
    CONSENSUS = "CONSENSUS"
    MULTIPLIER = "MULTIPLIER"
    INDICATORS = "INDICATORS"
    CONVERGED = "CONVERGED"
    ABORT = "ABORT"


class Proposal(BaseModel):
    """An agent's answer to one round: its copy of its consensus slice"""
    agent: str
    values: Dict[str, float] = Field(default_factory=dict)
    objective: float = 0.0
    indicators: Dict[str, List[int]] = Field(default_factory=dict)


class MessageEnvelope(BaseModel):
    """One NDJSON frame of the agent protocol"""
    model_config = ConfigDict(extra="forbid")

    kind: EnvelopeKind
    round: int = Field(..., ge=0)
    sender: str
    payload: Dict[str, Any] = Field(default_factory=dict)
    proto: int = PROTOCOL_VERSION


class FrequencyReport(BaseModel):
    """Simulated step response of one period's dispatch"""
    period: int
    disturbance: float
    h_total: float
    d_total: float
    rocof: float
    nadir: float
    qss: float
    passed: Dict[str, bool]
    within_margin_domain: bool = True

    @property
    def ok(self) -> bool:
        return all(self.passed.values())


class VerifyReport(BaseModel):
    """Monte-Carlo security check of a dispatch on fresh scenarios"""
    case_hash: str
    scenarios: int
    seed: int
    voltage_violations: int
    voltage_violation_rate: float
    line_violation_rate: float
    ibr_violation_rate: float
    boundary_violations: int
    sfr_violation_rate: float
    v_min: float
    v_max: float
    boundary_mismatch: float = 0.0
    audit: Optional[AuditReport] = None
    ac_checked: bool = False
    ac_v_min: Optional[float] = None
    ac_v_max: Optional[float] = None
    ac_failures: int = 0

    @property
    def clean(self) -> bool:
        return (
            self.voltage_violations == 0 and self.boundary_violations == 0
            and self.line_violation_rate == 0.0 and self.ibr_violation_rate == 0.0
        )


class CompareRow(BaseModel):
    label: str
    mode: RunMode
    objective: float
    optimal_error_pct: Optional[float] = None
    outer_iterations: int = 0
    admm_iterations: int = 0
    rocof: Optional[float] = None
    nadir: Optional[float] = None
    qss: Optional[float] = None
    voltage_violation_rate: Optional[float] = None
    adn_share_h: Optional[float] = None
    adn_share_d: Optional[float] = None
    adn_share_r_up: Optional[float] = None
    adn_share_r_dn: Optional[float] = None


class SweepRow(BaseModel):
    """One cell of the timing sweep: a case at one scenario count"""
    case: str
    buses: int
    binaries: int
    scenarios: int
    centralized_objective: float
    distributed_objective: float
    optimal_error_pct: float
    outer_iterations: int
    admm_iterations: int
    converged: bool
    build_seconds: float
    centralized_seconds: float
    distributed_seconds: float
