"""
Envelope codec, endpoints and the agent protocol over queues and TCP
"""
import asyncio
import json
import socket
import sys
from pathlib import Path

import pytest

from api.agents import RemoteAgent, local_agents, loopback, serve_agent
from api.transport import connect, decode, encode, parse_address, queue_pair, serve
from conftest import KEY, SMALL_CASE, ScalarAgent
from models.errors import AgentAbort, ProtocolError
from models.schemas import PROTOCOL_VERSION, EnvelopeKind, MessageEnvelope
from services.case_loader import load_case
from services.coordinator import AdmmConfig, Coordinator
from services.dispatch import build_artifacts, solve_distributed


def envelope(kind=EnvelopeKind.PROPOSAL, round=1, sender="adn1", **payload) -> MessageEnvelope:
    return MessageEnvelope(kind=kind, round=round, sender=sender, payload=payload)


def test_frames_are_single_json_lines():
    message = envelope(values={KEY: 0.25}, objective=1.5)
    frame = encode(message)
    assert frame.endswith(b"\n")
    assert frame.count(b"\n") == 1
    back = decode(frame)
    assert back == message
    assert back.proto == PROTOCOL_VERSION


def test_oversized_frames_are_refused():
    message = envelope(values={f"k{i}": float(i) for i in range(50)})
    with pytest.raises(ProtocolError):
        encode(message, limit=64)
    with pytest.raises(ProtocolError):
        decode(encode(message), limit=64)


@pytest.mark.parametrize("frame", [
    b"{not json}\n",
    b'{"kind": "PROPOSAL", "round": -1, "sender": "x"}\n',
    b'{"kind": "WHATEVER", "round": 1, "sender": "x"}\n',
    b'{"kind": "PROPOSAL", "round": 1, "sender": "x", "extra": 1}\n',
])
def test_malformed_frames(frame):
    with pytest.raises(ProtocolError):
        decode(frame)


def test_addresses():
    assert parse_address("10.0.0.2:7701") == ("10.0.0.2", 7701)
    assert parse_address(":7700") == ("127.0.0.1", 7700)
    with pytest.raises(ValueError):
        parse_address("localhost")


async def test_rounds_must_increase_per_sender():
    near, far = queue_pair()
    await near.send(envelope(round=1, sender="coordinator"))
    await near.send(envelope(round=1, sender="coordinator"))
    assert (await far.receive()).round == 1
    with pytest.raises(ProtocolError):
        await far.receive()


async def test_abort_may_reuse_a_round():
    near, far = queue_pair()
    await near.send(envelope(round=3, sender="coordinator"))
    await near.send(envelope(EnvelopeKind.ABORT, round=3, sender="coordinator", reason="stop"))
    await far.receive()
    assert (await far.receive()).kind == EnvelopeKind.ABORT


async def test_closed_peer_and_silence():
    near, far = queue_pair()
    with pytest.raises(AgentAbort):
        await far.receive(timeout=0.05)
    await near.close()
    with pytest.raises(AgentAbort):
        await far.receive()
    with pytest.raises(AgentAbort):
        await near.send(envelope())


async def test_loopback_matches_direct_agents():
    config = AdmmConfig(rho=2.0, epsilon=1e-10, max_iters=50, accumulate=True)
    direct = await Coordinator(
        [ScalarAgent("tps", "tso", 1.0), ScalarAgent("adn1", "dso", 0.0)], config,
    ).run_admm()

    proxies, tasks = loopback([ScalarAgent("tps", "tso", 1.0), ScalarAgent("adn1", "dso", 0.0)])
    await asyncio.gather(*(p.start() for p in proxies))
    assert [p.role for p in proxies] == ["tso", "dso"]
    coordinator = Coordinator(proxies, config)
    remote = await coordinator.run_admm()
    reports = await coordinator.finish(remote.converged)
    assert await asyncio.gather(*tasks) == [True, True]

    assert remote.k == direct.k
    assert remote.ybar[KEY] == pytest.approx(direct.ybar[KEY], abs=1e-12)
    assert [r.gap_t for r in remote.history] == pytest.approx([r.gap_t for r in direct.history])
    assert [r.region for r in reports] == ["tps", "adn1"]


async def test_version_mismatch_is_refused():
    near, far = queue_pair()
    task = asyncio.create_task(serve_agent(ScalarAgent("adn1", "dso", 0.0), far))
    await near.send(MessageEnvelope(kind=EnvelopeKind.HELLO, round=0, sender="coordinator", proto=PROTOCOL_VERSION + 1))
    reply = await near.receive()
    assert reply.kind == EnvelopeKind.ABORT
    assert "protocol version" in reply.payload["reason"]
    assert await task is False


async def test_requests_before_hello_end_the_session():
    near, far = queue_pair()
    task = asyncio.create_task(serve_agent(ScalarAgent("adn1", "dso", 0.0), far))
    await near.send(envelope(EnvelopeKind.MULTIPLIER, round=1, sender="coordinator"))
    reply = await near.receive()
    assert reply.kind == EnvelopeKind.ABORT
    assert await task is False


async def test_dropped_agent_aborts_the_round():
    near, far = queue_pair()
    proxy = RemoteAgent(near, "adn1")
    task = asyncio.create_task(serve_agent(ScalarAgent("adn1", "dso", 0.0), far))
    await proxy.start()
    await far.close()
    with pytest.raises(AgentAbort):
        await proxy.solve(1, None)
    task.cancel()
    await asyncio.gather(task, return_exceptions=True)


async def test_session_over_tcp():
    agent = ScalarAgent("adn1", "dso", 0.3)
    finished = asyncio.Event()

    async def handler(endpoint):
        await serve_agent(agent, endpoint)
        finished.set()

    server = await serve(handler, "127.0.0.1:0")
    port = server.sockets[0].getsockname()[1]
    async with server:
        proxy = RemoteAgent(await connect(f"127.0.0.1:{port}"))
        await proxy.start()
        assert (proxy.name, proxy.role, proxy.keys) == ("adn1", "dso", [KEY])
        proposal = await proxy.solve(1, None)
        assert proposal.values[KEY] == pytest.approx(0.3)
        report = await proxy.finish(2, True)
        assert report.region == "adn1"
        await asyncio.wait_for(finished.wait(), 5)


MAIN = Path(__file__).parent / "main.py"


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


async def connect_when_ready(address: str, process, attempts: int = 600):
    for _ in range(attempts):
        if process.returncode is not None:
            break
        try:
            return await connect(address)
        except AgentAbort:
            await asyncio.sleep(0.1)
    raise AgentAbort(f"agent at {address} never came up")


@pytest.mark.slow
async def test_agent_processes_over_tcp_match_in_process_agents(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(SMALL_CASE))
    n, seed = 12, 3
    config = AdmmConfig(rho=5.0, epsilon=1e-6, max_iters=200, accumulate=True)

    artifacts = build_artifacts(load_case(path), n, seed)
    direct = await solve_distributed(artifacts, local_agents(artifacts), config)

    roles = [["--role", "tso"], ["--role", "dso", "--adn-id", "1"]]
    addresses = [f"127.0.0.1:{free_port()}" for _ in roles]
    processes = [
        await asyncio.create_subprocess_exec(
            sys.executable, str(MAIN), "serve-agent", "--case", str(path), *role,
            "--scenarios", str(n), "--seed", str(seed), "--listen", address, "--idle-timeout", "300",
            cwd=str(MAIN.parent),
        )
        for role, address in zip(roles, addresses)
    ]
    try:
        agents = [
            RemoteAgent(await connect_when_ready(address, process), address)
            for address, process in zip(addresses, processes)
        ]
        remote = await solve_distributed(artifacts, agents, config)
        codes = [await asyncio.wait_for(process.wait(), 60) for process in processes]
    finally:
        for process in processes:
            if process.returncode is None:
                process.kill()
                await process.wait()

    assert codes == [0, 0]
    assert remote.converged == direct.converged
    assert remote.objective == pytest.approx(direct.objective, abs=1e-9)
    assert (remote.outer_iterations, remote.admm_iterations) == (direct.outer_iterations, direct.admm_iterations)
    assert [r.model_dump() for r in remote.history] == [r.model_dump() for r in direct.history]
