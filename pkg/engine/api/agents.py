"""
TSO and DSO agents
Local agents own one regional program and solve it in a worker thread;
RemoteAgent is the coordinator-side proxy of an agent behind an endpoint.
"""
import asyncio
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from api.transport import Endpoint, queue_pair, serve
from models.errors import AgentAbort, EngineError, ProtocolError, SolverError
from models.schemas import PROTOCOL_VERSION, EnvelopeKind, MessageEnvelope, Proposal, RegionReport
from services.results import indicator_assignment, region_report, solution_values, solved_cost_groups
from services.sed_builder import (
    ConsensusTerms,
    ModelArtifacts,
    RegionProgram,
    apply_consensus_terms,
    build_adn_fcsed,
    build_tps_fcsed,
)
from solvers.backend import solve
from solvers.program import MathProgram, Solution, export_lp, fix_variables
from solvers.qp import CutPool

logger = logging.getLogger(__name__)

COORDINATOR = "coordinator"


class LocalAgent:
    role = ""

    def __init__(self, artifacts: ModelArtifacts, backend: Optional[str] = None, dump_dir: Optional[Path] = None):
        self.artifacts = artifacts
        self.backend = backend
        self.dump_dir = Path(dump_dir) if dump_dir else None
        self.base = self.build()
        self.name = self.base.region
        self.keys: List[str] = list(self.base.consensus_keys)
        self.pool = CutPool()
        self.fixed: Optional[MathProgram] = None
        self.last: Optional[Solution] = None

    def build(self) -> RegionProgram:
        raise NotImplementedError

    async def start(self):
        logger.debug(f"{self.name}: local agent ready ({len(self.keys)} consensus entries)")

    async def _solve(self, program: MathProgram, pool: Optional[CutPool] = None) -> Solution:
        solution = await asyncio.to_thread(solve, program, self.backend, pool)
        if not solution.optimal:
            raise SolverError(f"{program.name}: {solution.status.value}")
        return solution

    def _proposal(self, solution: Solution) -> Proposal:
        values = solution_values(self.base, solution)
        return Proposal(
            agent=self.name,
            values={key: values[name] for name, key in zip(self.base.consensus_names, self.keys)},
            objective=sum(solved_cost_groups(self.base, solution).values()),
            indicators=indicator_assignment(self.base.blocks, values),
        )

    async def solve(self, round: int, terms: Optional[ConsensusTerms]) -> Proposal:
        program = self.fixed or self.base.program
        if terms is not None:
            program = apply_consensus_terms(program, self.base.consensus_names, self.keys, terms)
        if self.dump_dir is not None:
            self.dump_dir.mkdir(parents=True, exist_ok=True)
            (self.dump_dir / f"{self.name}-r{round}.lp").write_text(export_lp(program))
        self.last = await self._solve(program, self.pool)
        return self._proposal(self.last)

    async def resolve_indicators(self, round: int, ybar: Dict[str, float], radius: float) -> Proposal:
        """MILP re-solve with the consensus entries boxed around ybar"""
        boxed = self.base.program.copy()
        for name, key in zip(self.base.consensus_names, self.keys):
            var = boxed.variables[boxed.index(name)]
            lo, hi = max(var.lb, ybar[key] - radius), min(var.ub, ybar[key] + radius)
            if lo <= hi:
                var.lb, var.ub = lo, hi
        solution = await asyncio.to_thread(solve, boxed, self.backend)
        if not solution.optimal:
            logger.warning(f"⚠️ {self.name}: boxed re-solve {solution.status.value}, re-solving unboxed")
            solution = await self._solve(self.base.program)
        return self._proposal(solution)

    async def fix(self, round: int, assignment: Dict[str, List[int]]):
        if not self.base.indicator_names:
            self.fixed = None
            return
        values = {}
        for block in self.base.blocks:
            dropped = set(assignment.get(block.name, []))
            for i, name in block.indicators.items():
                values[name] = 1.0 if i in dropped else 0.0
        self.fixed = fix_variables(self.base.program, values)

    async def finish(self, round: int, converged: bool) -> RegionReport:
        if self.last is None:
            raise SolverError(f"{self.name}: finished before any solve")
        return region_report(self.artifacts.case, self.base, self.last, self.artifacts.layout)

    async def abort(self, round: int, reason: str):
        logger.warning(f"⚠️ {self.name}: aborted in round {round} ({reason})")


class TsoAgent(LocalAgent):
    role = "tso"

    def build(self) -> RegionProgram:
        return build_tps_fcsed(self.artifacts)


class DsoAgent(LocalAgent):
    role = "dso"

    def __init__(self, artifacts: ModelArtifacts, adn_id: int, backend: Optional[str] = None,
                 dump_dir: Optional[Path] = None):
        self.adn_id = adn_id
        super().__init__(artifacts, backend, dump_dir)

    def build(self) -> RegionProgram:
        return build_adn_fcsed(self.artifacts, self.adn_id)


def local_agents(artifacts: ModelArtifacts, backend: Optional[str] = None,
                 dump_dir: Optional[Path] = None) -> List[LocalAgent]:
    agents: List[LocalAgent] = [TsoAgent(artifacts, backend, dump_dir)]
    agents += [DsoAgent(artifacts, b, backend, dump_dir) for b in artifacts.case.adn_ids]
    return agents


def make_agent(artifacts: ModelArtifacts, role: str, adn_id: Optional[int] = None,
               backend: Optional[str] = None) -> LocalAgent:
    if role == "tso":
        return TsoAgent(artifacts, backend)
    if role == "dso":
        if adn_id is None:
            raise ValueError("a DSO agent needs --adn-id")
        return DsoAgent(artifacts, adn_id, backend)
    raise ValueError(f"unknown role {role!r}")


class RemoteAgent:
    """Coordinator-side proxy speaking the envelope protocol"""

    def __init__(self, endpoint: Endpoint, label: str = "agent"):
        self.endpoint = endpoint
        self.name = label
        self.role = ""
        self.keys: List[str] = []

    async def _send(self, kind: EnvelopeKind, round: int, payload: Optional[dict] = None):
        await self.endpoint.send(MessageEnvelope(kind=kind, round=round, sender=COORDINATOR, payload=payload or {}))

    async def _request(self, kind: EnvelopeKind, round: int, payload: Optional[dict] = None,
                       expect: Optional[EnvelopeKind] = None) -> MessageEnvelope:
        await self._send(kind, round, payload)
        reply = await self.endpoint.receive()
        if reply.kind == EnvelopeKind.ABORT:
            await self.endpoint.close()
            raise AgentAbort(f"{self.name} aborted: {reply.payload.get('reason', 'no reason given')}")
        expect = expect or kind
        if reply.kind != expect or reply.round != round:
            raise ProtocolError(f"{self.name}: expected {expect.value} for round {round}, got {reply.kind.value} round {reply.round}")
        return reply

    async def start(self):
        await self._send(EnvelopeKind.HELLO, 0)
        reply = await self.endpoint.receive()
        if reply.kind == EnvelopeKind.ABORT:
            await self.endpoint.close()
            raise ProtocolError(f"agent refused the session: {reply.payload.get('reason')}")
        if reply.kind != EnvelopeKind.HELLO or reply.proto != PROTOCOL_VERSION:
            raise ProtocolError(f"bad handshake reply {reply.kind.value} (proto {reply.proto})")
        self.name = reply.payload["name"]
        self.role = reply.payload["role"]
        self.keys = list(reply.payload["keys"])
        logger.info(f"✅ {self.name} ({self.role}) joined with {len(self.keys)} consensus entries")

    async def solve(self, round: int, terms: Optional[ConsensusTerms]) -> Proposal:
        payload = {} if terms is None else {"lam": terms.lam, "ybar": terms.ybar, "rho": terms.rho}
        reply = await self._request(EnvelopeKind.MULTIPLIER, round, payload, EnvelopeKind.PROPOSAL)
        return Proposal.model_validate(reply.payload)

    async def resolve_indicators(self, round: int, ybar: Dict[str, float], radius: float) -> Proposal:
        reply = await self._request(
            EnvelopeKind.CONSENSUS, round, {"ybar": ybar, "radius": radius}, EnvelopeKind.PROPOSAL,
        )
        return Proposal.model_validate(reply.payload)

    async def fix(self, round: int, assignment: Dict[str, List[int]]):
        await self._request(EnvelopeKind.INDICATORS, round, {"assignment": assignment})

    async def finish(self, round: int, converged: bool) -> RegionReport:
        reply = await self._request(EnvelopeKind.CONVERGED, round, {"converged": converged})
        await self.endpoint.close()
        return RegionReport.model_validate(reply.payload)

    async def abort(self, round: int, reason: str):
        if self.endpoint.closed:
            return
        try:
            await self._send(EnvelopeKind.ABORT, round, {"reason": reason})
        finally:
            await self.endpoint.close()


async def serve_agent(agent: LocalAgent, endpoint: Endpoint, idle_timeout: Optional[float] = None) -> bool:
    """Answer coordinator requests until CONVERGED or ABORT; True on a clean finish"""

    async def reply(kind: EnvelopeKind, round: int, payload: Optional[dict] = None):
        await endpoint.send(MessageEnvelope(kind=kind, round=round, sender=agent.name, payload=payload or {}))

    greeted = False
    while True:
        try:
            request = await endpoint.receive(idle_timeout)
        except AgentAbort as e:
            logger.warning(f"⚠️ {agent.name}: {e}, shutting down")
            return False
        except ProtocolError as e:
            logger.error(f"❌ {agent.name}: {e}, closing connection")
            await endpoint.close()
            return False

        kind, round, payload = request.kind, request.round, request.payload
        try:
            if kind == EnvelopeKind.HELLO:
                if request.proto != PROTOCOL_VERSION:
                    reason = f"protocol version {request.proto} not supported (expected {PROTOCOL_VERSION})"
                    logger.error(f"❌ {agent.name}: refusing session, {reason}")
                    await reply(EnvelopeKind.ABORT, round, {"reason": reason})
                    return False
                await reply(EnvelopeKind.HELLO, round, {"name": agent.name, "role": agent.role, "keys": agent.keys})
                greeted = True
            elif not greeted:
                raise ProtocolError(f"{kind.value} before HELLO")
            elif kind == EnvelopeKind.ABORT:
                logger.warning(f"⚠️ {agent.name}: coordinator aborted ({payload.get('reason')})")
                return False
            elif kind == EnvelopeKind.MULTIPLIER:
                terms = None
                if payload:
                    terms = ConsensusTerms(dict(payload["lam"]), dict(payload["ybar"]), float(payload["rho"]))
                proposal = await agent.solve(round, terms)
                await reply(EnvelopeKind.PROPOSAL, round, proposal.model_dump())
            elif kind == EnvelopeKind.CONSENSUS:
                proposal = await agent.resolve_indicators(round, dict(payload["ybar"]), float(payload["radius"]))
                await reply(EnvelopeKind.PROPOSAL, round, proposal.model_dump())
            elif kind == EnvelopeKind.INDICATORS:
                await agent.fix(round, dict(payload["assignment"]))
                await reply(EnvelopeKind.INDICATORS, round)
            elif kind == EnvelopeKind.CONVERGED:
                report = await agent.finish(round, bool(payload.get("converged", True)))
                await reply(EnvelopeKind.CONVERGED, round, report.model_dump())
                logger.info(f"✅ {agent.name}: session finished")
                return True
            else:
                raise ProtocolError(f"unexpected {kind.value} from coordinator")
        except (EngineError, KeyError, TypeError, ValueError) as e:
            logger.error(f"❌ {agent.name}: round {round} failed: {e}")
            try:
                await reply(EnvelopeKind.ABORT, round, {"reason": str(e)})
            except EngineError:
                pass
            return False


async def serve_tcp(agent: LocalAgent, address: str, idle_timeout: Optional[float] = None) -> bool:
    """Serve one coordinator session on address, then exit"""
    connected = asyncio.Event()
    done: asyncio.Future = asyncio.get_running_loop().create_future()

    async def handler(endpoint):
        if connected.is_set():
            logger.warning(f"⚠️ {agent.name}: second coordinator refused")
            return
        connected.set()
        result = False
        try:
            result = await serve_agent(agent, endpoint, idle_timeout)
        finally:
            if not done.done():
                done.set_result(result)

    server = await serve(handler, address)
    async with server:
        try:
            await asyncio.wait_for(connected.wait(), idle_timeout)
        except asyncio.TimeoutError:
            logger.info(f"{agent.name}: no coordinator within {idle_timeout:.0f}s, shutting down")
            return False
        return await done


def loopback(agents: Sequence[LocalAgent]) -> Tuple[List[RemoteAgent], List[asyncio.Task]]:
    """Proxies talking to the given agents over in-process queues"""
    proxies, tasks = [], []
    for agent in agents:
        near, far = queue_pair()
        tasks.append(asyncio.create_task(serve_agent(agent, far)))
        proxies.append(RemoteAgent(near, agent.name))
    return proxies, tasks
