"""
Agent transport
Newline-delimited JSON envelopes over asyncio streams (TCP) or an in-process
queue pair. Both carry the same encoded frames.
"""
import asyncio
import logging
from typing import Awaitable, Callable, Dict, Optional, Tuple

from pydantic import ValidationError

from config import get_settings
from models.errors import AgentAbort, ProtocolError
from models.schemas import EnvelopeKind, MessageEnvelope

logger = logging.getLogger(__name__)


def encode(envelope: MessageEnvelope, limit: Optional[int] = None) -> bytes:
    limit = limit or get_settings().frame_limit
    frame = envelope.model_dump_json().encode("utf-8") + b"\n"
    if len(frame) > limit:
        raise ProtocolError(f"{envelope.kind.value} frame of {len(frame)} bytes exceeds {limit}")
    return frame


def decode(frame: bytes, limit: Optional[int] = None) -> MessageEnvelope:
    limit = limit or get_settings().frame_limit
    if len(frame) > limit:
        raise ProtocolError(f"frame of {len(frame)} bytes exceeds {limit}")
    try:
        return MessageEnvelope.model_validate_json(frame.strip())
    except ValidationError as e:
        raise ProtocolError(f"malformed frame: {e.errors()[0]['msg'] if e.errors() else e}") from e


def parse_address(address: str) -> Tuple[str, int]:
    host, sep, port = address.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected host:port, got {address!r}")
    return host or "127.0.0.1", int(port)


class Endpoint:
    """One side of an agent connection"""

    def __init__(self, timeout: Optional[float] = None, limit: Optional[int] = None):
        settings = get_settings()
        self.timeout = timeout or settings.round_timeout
        self.limit = limit or settings.frame_limit
        self.last_round: Dict[str, int] = {}
        self.closed = False

    async def _write(self, frame: bytes):
        raise NotImplementedError

    async def _read(self) -> bytes:
        raise NotImplementedError

    async def close(self):
        self.closed = True

    async def send(self, envelope: MessageEnvelope):
        if self.closed:
            raise AgentAbort("endpoint is closed")
        await self._write(encode(envelope, self.limit))

    async def receive(self, timeout: Optional[float] = None) -> MessageEnvelope:
        wait = timeout or self.timeout
        try:
            frame = await asyncio.wait_for(self._read(), wait)
        except asyncio.TimeoutError:
            raise AgentAbort(f"no frame within {wait:.0f}s")
        if not frame:
            raise AgentAbort("connection closed by peer")
        envelope = decode(frame, self.limit)
        previous = self.last_round.get(envelope.sender)
        if previous is not None and envelope.round <= previous and envelope.kind != EnvelopeKind.ABORT:
            raise ProtocolError(f"round {envelope.round} from {envelope.sender} after round {previous}")
        self.last_round[envelope.sender] = envelope.round
        return envelope


class StreamEndpoint(Endpoint):
    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter, **kwargs):
        super().__init__(**kwargs)
        self.reader = reader
        self.writer = writer

    @property
    def peer(self) -> str:
        info = self.writer.get_extra_info("peername")
        return f"{info[0]}:{info[1]}" if info else "?"

    async def _write(self, frame: bytes):
        try:
            self.writer.write(frame)
            await self.writer.drain()
        except (ConnectionError, RuntimeError) as e:
            raise AgentAbort(f"send to {self.peer} failed: {e}") from e

    async def _read(self) -> bytes:
        try:
            return await self.reader.readline()
        except (asyncio.LimitOverrunError, ValueError) as e:
            raise ProtocolError(f"frame from {self.peer} exceeds {self.limit} bytes") from e
        except ConnectionError:
            return b""

    async def close(self):
        if self.closed:
            return
        await super().close()
        self.writer.close()
        try:
            await self.writer.wait_closed()
        except ConnectionError:
            pass


class QueueEndpoint(Endpoint):
    """In-process endpoint; an empty frame marks the other side closing"""

    def __init__(self, inbox: asyncio.Queue, outbox: asyncio.Queue, **kwargs):
        super().__init__(**kwargs)
        self.inbox = inbox
        self.outbox = outbox

    async def _write(self, frame: bytes):
        await self.outbox.put(frame)

    async def _read(self) -> bytes:
        return await self.inbox.get()

    async def close(self):
        if self.closed:
            return
        await super().close()
        await self.outbox.put(b"")


def queue_pair(**kwargs) -> Tuple[QueueEndpoint, QueueEndpoint]:
    """(coordinator side, agent side)"""
    a_to_b: asyncio.Queue = asyncio.Queue()
    b_to_a: asyncio.Queue = asyncio.Queue()
    return QueueEndpoint(b_to_a, a_to_b, **kwargs), QueueEndpoint(a_to_b, b_to_a, **kwargs)


async def connect(address: str, timeout: Optional[float] = None) -> StreamEndpoint:
    host, port = parse_address(address)
    limit = get_settings().frame_limit
    wait = timeout or get_settings().round_timeout
    try:
        reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port, limit=limit + 1), wait)
    except (OSError, asyncio.TimeoutError) as e:
        raise AgentAbort(f"cannot reach agent at {address}: {e}") from e
    logger.info(f"✅ Connected to agent at {address}")
    return StreamEndpoint(reader, writer, timeout=timeout)


Handler = Callable[[StreamEndpoint], Awaitable[None]]


async def serve(handler: Handler, address: str, timeout: Optional[float] = None) -> asyncio.AbstractServer:
    """Start a TCP server handing each connection to handler as a StreamEndpoint"""
    host, port = parse_address(address)
    limit = get_settings().frame_limit

    async def on_connect(reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        endpoint = StreamEndpoint(reader, writer, timeout=timeout)
        logger.info(f"Coordinator connected from {endpoint.peer}")
        try:
            await handler(endpoint)
        finally:
            await endpoint.close()

    server = await asyncio.start_server(on_connect, host, port, limit=limit + 1)
    logger.info(f"✅ Agent listening on {host}:{port}")
    return server
