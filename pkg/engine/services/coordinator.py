"""
Outer-layer ADMM coordinator
Drives one TSO agent and one agent per DSO through lock-step consensus rounds,
and alternates ADMM passes with indicator re-solves until the scenario
indicators stop changing.
"""
import asyncio
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence

import pandas as pd
from pydantic import BaseModel, Field

from config import get_settings
from models.errors import AgentAbort, ConvergenceError, ProtocolError
from models.schemas import HistoryRecord, Proposal, RegionReport
from services.results import write_atomic
from services.sed_builder import ConsensusTerms

logger = logging.getLogger(__name__)

DIVERGENCE_WINDOW = 20
DIVERGENCE_FACTOR = 10.0
HISTORY_COLUMNS = ["k", "gap_t", "gap_d", "obj_t", "obj_d_total"]

Indicators = Dict[str, List[int]]


class AdmmConfig(BaseModel):
    rho: float = Field(5.0, gt=0)
    epsilon: float = Field(1e-4, gt=0)
    max_iters: int = Field(200, ge=1)
    # lambda^k = lambda^{k-1} + rho (x - ybar) instead of the reset rule
    accumulate: bool = False
    # per-DSO penalty, keyed by agent name
    rho_overrides: Dict[str, float] = Field(default_factory=dict)

    @classmethod
    def from_settings(cls, **overrides) -> "AdmmConfig":
        settings = get_settings()
        values = dict(
            rho=settings.admm_rho,
            epsilon=settings.admm_epsilon,
            max_iters=settings.admm_max_iters,
            accumulate=settings.admm_accumulate,
        )
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def rho_for(self, agent_name: str) -> float:
        return self.rho_overrides.get(agent_name, self.rho)


class Agent(Protocol):
    """What the coordinator needs from a TSO or DSO, local or remote"""
    name: str
    role: str
    keys: List[str]

    async def start(self) -> None: ...

    async def solve(self, round: int, terms: Optional[ConsensusTerms]) -> Proposal: ...

    async def resolve_indicators(self, round: int, ybar: Dict[str, float], radius: float) -> Proposal: ...

    async def fix(self, round: int, assignment: Indicators) -> None: ...

    async def finish(self, round: int, converged: bool) -> RegionReport: ...

    async def abort(self, round: int, reason: str) -> None: ...


@dataclass
class AdmmState:
    k: int = 0
    ybar: Dict[str, float] = field(default_factory=dict)
    lambda_t: Dict[str, float] = field(default_factory=dict)
    lambda_d: Dict[str, Dict[str, float]] = field(default_factory=dict)
    gap_t: float = math.inf
    gap_d: float = math.inf
    history: List[HistoryRecord] = field(default_factory=list)
    proposals: Dict[str, Proposal] = field(default_factory=dict)
    converged: bool = False


@dataclass
class TractableOutcome:
    state: AdmmState
    reports: List[RegionReport]
    indicators: Indicators
    outer_iterations: int
    converged: bool
    history: List[HistoryRecord]

    @property
    def admm_iterations(self) -> int:
        return len([r for r in self.history if r.k > 0])


def merge_indicators(proposals: Sequence[Proposal]) -> Indicators:
    merged: Indicators = {}
    for proposal in proposals:
        for block, dropped in proposal.indicators.items():
            merged[block] = sorted(dropped)
    return dict(sorted(merged.items()))


class Coordinator:
    """Lock-step rounds over a fixed set of agents"""

    def __init__(self, agents: Sequence[Agent], config: Optional[AdmmConfig] = None):
        tso = [a for a in agents if a.role == "tso"]
        if len(tso) != 1:
            raise ProtocolError(f"expected exactly one TSO agent, got {len(tso)}")
        self.tso = tso[0]
        self.dsos = [a for a in agents if a.role == "dso"]
        self.agents = [self.tso] + self.dsos
        self.config = config or AdmmConfig.from_settings()
        self.round = 0
        self.history: List[HistoryRecord] = []
        self.owner: Dict[str, Agent] = {}
        for dso in self.dsos:
            for key in dso.keys:
                self.owner[key] = dso
        missing = [key for key in self.tso.keys if key not in self.owner]
        if missing:
            raise ProtocolError(f"consensus entries without a DSO owner: {missing[:5]}")

    def next_round(self) -> int:
        self.round += 1
        return self.round

    async def abort(self, reason: str):
        round = self.next_round()
        for agent in self.agents:
            try:
                await agent.abort(round, reason)
            except Exception as e:
                logger.warning(f"⚠️ could not deliver ABORT to {agent.name}: {e}")

    async def _gather(self, calls) -> list:
        results = await asyncio.gather(*calls, return_exceptions=True)
        for agent, result in zip(self.agents, results):
            if isinstance(result, BaseException):
                reason = f"{agent.name}: {result}"
                logger.error(f"❌ Round {self.round} failed, aborting ({reason})")
                await self.abort(reason)
                raise AgentAbort(reason, list(self.history)) from result
        return results

    # ADMM pieces

    def _average(self, proposals: Dict[str, Proposal]) -> Dict[str, float]:
        z = proposals[self.tso.name].values
        ybar = {}
        for key in self.tso.keys:
            y = proposals[self.owner[key].name].values
            if key not in z or key not in y:
                raise ProtocolError(f"proposal lacks consensus entry {key}")
            ybar[key] = 0.5 * (z[key] + y[key])
        return ybar

    def _update_multipliers(self, state: AdmmState):
        """Multiplier update and squared-norm gaps against the new ybar"""
        cfg = self.config
        z = state.proposals[self.tso.name].values
        gap_t = 0.0
        lambda_t = {}
        for key, center in state.ybar.items():
            diff = z[key] - center
            gap_t += diff * diff
            step = cfg.rho * diff
            lambda_t[key] = state.lambda_t.get(key, 0.0) + step if cfg.accumulate else step
        gap_d = 0.0
        lambda_d = {}
        for dso in self.dsos:
            y = state.proposals[dso.name].values
            rho = cfg.rho_for(dso.name)
            previous = state.lambda_d.get(dso.name, {})
            own = {}
            for key in dso.keys:
                diff = y[key] - state.ybar[key]
                gap_d += diff * diff
                step = rho * diff
                own[key] = previous.get(key, 0.0) + step if cfg.accumulate else step
            lambda_d[dso.name] = own
        state.lambda_t, state.lambda_d = lambda_t, lambda_d
        state.gap_t, state.gap_d = gap_t, gap_d

    def _terms(self, agent: Agent, state: AdmmState) -> ConsensusTerms:
        if agent is self.tso:
            return ConsensusTerms(dict(state.lambda_t), dict(state.ybar), self.config.rho)
        return ConsensusTerms(
            dict(state.lambda_d[agent.name]),
            {key: state.ybar[key] for key in agent.keys},
            self.config.rho_for(agent.name),
        )

    def _record(self, state: AdmmState, outer: int):
        record = HistoryRecord(
            k=state.k,
            gap_t=state.gap_t,
            gap_d=state.gap_d,
            obj_t=state.proposals[self.tso.name].objective,
            obj_d_total=sum(state.proposals[d.name].objective for d in self.dsos),
            outer=outer,
        )
        state.history.append(record)
        self.history.append(record)

    def _check_divergence(self, state: AdmmState):
        if len(state.history) <= DIVERGENCE_WINDOW:
            return
        gap = max(state.gap_t, state.gap_d)
        before = state.history[-1 - DIVERGENCE_WINDOW]
        reference = max(before.gap_t, before.gap_d)
        if gap > self.config.epsilon and gap > DIVERGENCE_FACTOR * reference:
            raise ConvergenceError(
                f"ADMM gap grew from {reference:.3e} to {gap:.3e} over {DIVERGENCE_WINDOW} iterations",
                list(self.history),
            )

    async def _solve_all(self, state: Optional[AdmmState]) -> Dict[str, Proposal]:
        round = self.next_round()
        calls = [
            agent.solve(round, None if state is None else self._terms(agent, state))
            for agent in self.agents
        ]
        proposals = await self._gather(calls)
        return {agent.name: p for agent, p in zip(self.agents, proposals)}

    async def run_admm(self, fixed_indicators: Optional[Indicators] = None, outer: int = 0) -> AdmmState:
        """
        One ADMM pass. Subproblems must be continuous: either they carry no
        scenario indicators or fixed_indicators pins all of them.
        """
        cfg = self.config
        if fixed_indicators is not None:
            round = self.next_round()
            await self._gather([agent.fix(round, fixed_indicators) for agent in self.agents])

        # independent solves, then ybar and lambda from the first proposals
        state = AdmmState()
        state.proposals = await self._solve_all(None)
        state.ybar = self._average(state.proposals)
        self._update_multipliers(state)
        self._record(state, outer)
        logger.info(
            f"🔄 ADMM pass {outer} started: {len(state.ybar)} consensus entries, "
            f"rho={cfg.rho}, {'accumulating' if cfg.accumulate else 'reset'} multipliers"
        )

        for k in range(1, cfg.max_iters + 1):
            state.k = k
            state.proposals = await self._solve_all(state)
            state.ybar = self._average(state.proposals)
            self._update_multipliers(state)
            self._record(state, outer)
            logger.debug(f"ADMM k={k}: gap_t={state.gap_t:.3e} gap_d={state.gap_d:.3e}")
            if state.gap_t <= cfg.epsilon and state.gap_d <= cfg.epsilon:
                state.converged = True
                break
            try:
                self._check_divergence(state)
            except ConvergenceError:
                logger.error(f"❌ ADMM diverging at k={k}, aborting")
                await self.abort("ADMM diverged")
                raise
            if k % 10 == 0:
                logger.info(f"🔄 ADMM k={k}: gap_t={state.gap_t:.3e} gap_d={state.gap_d:.3e}")

        if state.converged:
            logger.info(f"✅ ADMM pass {outer} converged at k={state.k} (gap {max(state.gap_t, state.gap_d):.3e})")
        else:
            logger.warning(
                f"⚠️ ADMM pass {outer} stopped at max_iters={cfg.max_iters} "
                f"(gap_t={state.gap_t:.3e}, gap_d={state.gap_d:.3e})"
            )
        return state

    async def independent_indicators(self) -> Indicators:
        """Indicators of the independent MILP solves"""
        proposals = await self._solve_all(None)
        return merge_indicators(list(proposals.values()))

    async def resolve_indicators(self, state: AdmmState) -> Indicators:
        radius = math.sqrt(self.config.epsilon)
        round = self.next_round()
        calls = [
            agent.resolve_indicators(round, {key: state.ybar[key] for key in agent.keys}, radius)
            for agent in self.agents
        ]
        return merge_indicators(await self._gather(calls))

    async def finish(self, converged: bool) -> List[RegionReport]:
        round = self.next_round()
        return await self._gather([agent.finish(round, converged) for agent in self.agents])

    async def run_tractable(self, outer_max: Optional[int] = None) -> TractableOutcome:
        """ADMM with fixed indicators, alternated with indicator re-solves"""
        outer_max = outer_max or get_settings().outer_max_iters
        indicators = await self.independent_indicators()
        logger.info(f"🔄 Initial indicators: {_count(indicators)} scenarios dropped over {len(indicators)} blocks")

        state = AdmmState()
        fixed_point = False
        outer = 0
        for outer in range(1, outer_max + 1):
            state = await self.run_admm(indicators, outer)
            updated = await self.resolve_indicators(state)
            if updated == indicators:
                fixed_point = True
                logger.info(f"✅ Indicators unchanged after outer iteration {outer}")
                break
            changed = sum(1 for b in set(updated) | set(indicators) if updated.get(b) != indicators.get(b))
            logger.info(f"🔄 Outer iteration {outer}: {changed} blocks changed their dropped scenarios")
            indicators = updated

        converged = fixed_point and state.converged
        if not fixed_point:
            logger.warning(f"⚠️ Indicators still changing after {outer_max} outer iterations")
        reports = await self.finish(converged)
        return TractableOutcome(
            state=state,
            reports=reports,
            indicators=indicators,
            outer_iterations=outer,
            converged=converged,
            history=list(self.history),
        )


def _count(indicators: Indicators) -> int:
    return sum(len(v) for v in indicators.values())


async def run_admm(
    agents: Sequence[Agent],
    config: Optional[AdmmConfig] = None,
    fixed_indicators: Optional[Indicators] = None,
) -> AdmmState:
    return await Coordinator(agents, config).run_admm(fixed_indicators)


async def run_tractable(
    agents: Sequence[Agent],
    config: Optional[AdmmConfig] = None,
    outer_max: Optional[int] = None,
) -> TractableOutcome:
    return await Coordinator(agents, config).run_tractable(outer_max)


def history_frame(history: Sequence[HistoryRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in history], columns=HISTORY_COLUMNS + ["outer"])


def export_history_csv(history: Sequence[HistoryRecord], path: Path) -> Path:
    frame = history_frame(history)[HISTORY_COLUMNS]
    write_atomic(path, frame.to_csv(index=False))
    logger.info(f"✅ Wrote {len(frame)} ADMM iterations to {path}")
    return Path(path)
