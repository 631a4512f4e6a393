"""
Forecast-error scenarios, quantiles, disturbance bounds and boundary envelopes
"""
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import beta as beta_dist

from models.case import ForecastErrorSpec, ForecastSource, ItdCase, SourceKind

logger = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
FRESH_SALT = 0xA0761D6478BD642F


def splitmix64(value: int) -> int:
    """One splitmix64 output step"""
    z = (value + GOLDEN_GAMMA) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def stream_seed(seed: int, column: int) -> int:
    """Independent 64-bit seed for one scenario column"""
    return splitmix64((seed & MASK64) ^ splitmix64(column + 1))


def fresh_seed(seed: int) -> int:
    """Deterministic seed disjoint from the training stream, for audits"""
    return splitmix64((seed ^ FRESH_SALT) & MASK64)


def column_name(source_id: str, period: int) -> str:
    return f"{source_id}@{period}"


@dataclass(frozen=True)
class DisturbanceBounds:
    zeta_max: float
    zeta_min: float


@dataclass(frozen=True)
class BoundaryEnvelope:
    dp_up_max: float
    dp_up_min: float
    dp_dn_max: float
    dp_dn_min: float


@dataclass(frozen=True)
class ScenarioSet:
    """n x (sources * periods) centered error draws in p.u."""
    n: int
    seed: Optional[int]
    horizon: int
    sources: List[ForecastSource]
    columns: List[str]
    draws: np.ndarray

    def column(self, source_id: str, period: int) -> np.ndarray:
        return self.draws[:, self.columns.index(column_name(source_id, period))]

    @property
    def regions(self) -> List[str]:
        return sorted({s.region for s in self.sources})

    def region_sum(self, region: str, period: int) -> np.ndarray:
        """Regional disturbance: sum of demand errors only"""
        total = np.zeros(self.n)
        for source in self.sources:
            if source.region == region and source.kind == SourceKind.DEMAND:
                total = total + self.column(source.id, period)
        return total

    def region_sums(self, period: int) -> Dict[str, np.ndarray]:
        return {region: self.region_sum(region, period) for region in self.regions}

    def sys_sum(self, period: int) -> np.ndarray:
        total = np.zeros(self.n)
        for values in self.region_sums(period).values():
            total = total + values
        return total

    def demand_errors(self, region: str, period: int) -> Dict[int, np.ndarray]:
        """Per-bus demand error draws of one region"""
        out: Dict[int, np.ndarray] = {}
        for source in self.sources:
            if source.region == region and source.kind == SourceKind.DEMAND:
                bus = int(source.target)
                out[bus] = out.get(bus, np.zeros(self.n)) + self.column(source.id, period)
        return out

    def renewable_errors(self, region: str, period: int) -> Dict[str, np.ndarray]:
        out: Dict[str, np.ndarray] = {}
        for source in self.sources:
            if source.region == region and source.kind != SourceKind.DEMAND:
                out[source.target] = out.get(source.target, np.zeros(self.n)) + self.column(source.id, period)
        return out

    def subset(self, count: int) -> "ScenarioSet":
        """First `count` scenarios"""
        return ScenarioSet(count, self.seed, self.horizon, self.sources, self.columns, self.draws[:count])


def sample(spec: ForecastErrorSpec, n: int, seed: int, horizon: int = 1) -> ScenarioSet:
    """Inverse-CDF beta sampling, one seeded PCG64 stream per (source, period) column"""
    if n < 1:
        raise ValueError("need at least one scenario")
    columns, draws = [], []
    for period in range(horizon):
        for index, source in enumerate(spec.sources):
            column = period * len(spec.sources) + index
            generator = np.random.Generator(np.random.PCG64(stream_seed(seed, column)))
            uniforms = generator.random(n)
            unit = beta_dist.ppf(uniforms, source.alpha, source.beta)
            draws.append(source.lo + (source.hi - source.lo) * unit - source.mean_shift)
            columns.append(column_name(source.id, period))
    matrix = np.column_stack(draws) if draws else np.zeros((n, 0))
    logger.debug(f"Sampled {n} scenarios x {len(columns)} columns (seed {seed})")
    return ScenarioSet(n=n, seed=seed, horizon=horizon, sources=list(spec.sources), columns=columns, draws=matrix)


def empirical_quantile(samples: Sequence[float], level: float, side: str = "upper") -> float:
    """Order-statistic quantile: upper returns the ceil((1-level)*n)-th smallest value"""
    values = np.sort(np.asarray(samples, dtype=float))
    n = len(values)
    if n == 0:
        raise ValueError("empirical_quantile needs at least one sample")
    if not 0.0 < level <= 0.5:
        raise ValueError(f"level {level} outside (0, 0.5]")
    rank = max(1, math.ceil((1.0 - level) * n - 1e-9))
    if side == "upper":
        return float(values[rank - 1])
    if side == "lower":
        return float(values[n - rank])
    raise ValueError(f"unknown side {side!r}")


def disturbance_bounds(spec: ForecastErrorSpec, regions: Sequence[str]) -> Dict[str, DisturbanceBounds]:
    """Worst-case regional disturbance from the centered demand-error supports"""
    bounds = {}
    for region in regions:
        supports = [s.centered_support for s in spec.for_region(region, SourceKind.DEMAND)]
        bounds[region] = DisturbanceBounds(
            zeta_max=sum(hi for _, hi in supports),
            zeta_min=sum(lo for lo, _ in supports),
        )
    return bounds


def case_bounds(case: ItdCase) -> Dict[str, DisturbanceBounds]:
    return disturbance_bounds(case.uncertainty, list(case.regions))


def worst_case_rhs(bounds: Dict[str, DisturbanceBounds]) -> float:
    """max(sum of upper bounds, -sum of lower bounds) over all regions"""
    upper = sum(b.zeta_max for b in bounds.values())
    lower = sum(b.zeta_min for b in bounds.values())
    return max(upper, -lower, 0.0)


def boundary_envelope(r_up: float, r_dn: float, bounds: DisturbanceBounds) -> BoundaryEnvelope:
    """Regulation power an ADN can exchange with the TPS during SFR"""
    return BoundaryEnvelope(
        dp_up_max=r_up - bounds.zeta_min,
        dp_up_min=r_up - bounds.zeta_max,
        dp_dn_max=r_dn + bounds.zeta_max,
        dp_dn_min=r_dn + bounds.zeta_min,
    )


def renewable_outputs(scenarios: ScenarioSet, case: ItdCase, region: str, period: int) -> Dict[str, np.ndarray]:
    """Realized available output per IBR: forecast plus error, clipped at zero"""
    data = case.regions[region]
    errors = scenarios.renewable_errors(region, period)
    out = {}
    for unit in data.renewables:
        forecast = data.forecast(unit, period)
        out[unit.id] = np.clip(forecast + errors.get(unit.id, np.zeros(scenarios.n)), 0.0, None)
    return out


def export_scenarios_csv(scenarios: ScenarioSet, path: Path) -> Path:
    frame = pd.DataFrame(scenarios.draws, columns=scenarios.columns)
    frame.index.name = "scenario"
    frame.to_csv(path)
    logger.info(f"✅ Wrote {scenarios.n} scenarios to {path}")
    return Path(path)


def import_scenarios_csv(path: Path, spec: ForecastErrorSpec, horizon: int) -> ScenarioSet:
    """Replay a scenario CSV; columns are matched to the case sources by name"""
    frame = pd.read_csv(path, index_col=0)
    columns = [column_name(s.id, t) for t in range(horizon) for s in spec.sources]
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise ValueError(f"scenario CSV lacks columns {missing[:5]}")
    return ScenarioSet(
        n=len(frame), seed=None, horizon=horizon, sources=list(spec.sources),
        columns=columns, draws=frame[columns].to_numpy(dtype=float),
    )
