import asyncio
import logging
import os
import time
from itertools import cycle
from typing import Any, Callable, Dict, Iterator, List, Optional, Set, TextIO, Tuple

from attr import Attribute, attrib, attrs

from peerscore import __version__
from peerscore.model import (
    DIRECTION_OUTBOUND,
    KIND_ADDR,
    KIND_BLOCK,
    KIND_BLOCK_HEIGHT,
    KIND_CONNECT,
    KIND_DISCONNECT,
    KIND_FEEFILTER,
    KIND_HEADERS_HEIGHT,
    KIND_MSG,
    KIND_PING_RTT,
    KIND_PROTO_PING_RTT,
    KIND_TX,
    MAX_COMMAND_LEN,
    AddrPayload,
    BlockPayload,
    DisconnectPayload,
    FeeFilterPayload,
    HeightPayload,
    MsgPayload,
    ObservationEvent,
    Payload,
    PeerKey,
    RttPayload,
    TxPayload,
)
from peerscore.trace import TRACE_ENCODING, format_event
from peerscore.util import PathType, tuplify_strs, validator_positive
from peerscore.wire import (
    BLOCK_INV_TYPES,
    COMMAND_ADDR,
    COMMAND_ADDRV2,
    COMMAND_FEEFILTER,
    COMMAND_HEADERS,
    COMMAND_INV,
    COMMAND_PING,
    COMMAND_PONG,
    COMMAND_VERACK,
    COMMAND_VERSION,
    MAINNET_MAGIC,
    PROTOCOL_VERSION,
    TX_INV_TYPES,
    MessageStream,
    WireMessage,
    encode_message,
    nonce_payload,
    parse_count,
    parse_feefilter,
    parse_inv,
    parse_nonce,
    parse_version_start_height,
    version_payload,
)

logger = logging.getLogger(__name__)

MAX_OUTBOUND_LIMIT = 10
DEFAULT_PORT = 8333
DEFAULT_USER_AGENT = f"/peerscore:{__version__}/"
READ_SIZE = 65536
# Fees can't be recovered from inv announcements, so transactions get placeholders
UNKNOWN_FEE = 0
UNKNOWN_SIZE = 1

REASON_HANDSHAKE_TIMEOUT = "handshake_timeout"
REASON_PEER_CLOSED = "peer_closed"
REASON_PROTOCOL_ERROR = "protocol_error"
REASON_CONNECTION_ERROR = "connection_error"
REASON_SHUTDOWN = "shutdown"


def _normalize_endpoints(endpoints: Any) -> Tuple[str, ...]:
    normalized = []
    for endpoint in tuplify_strs(endpoints):
        endpoint = endpoint.strip()
        is_bare_ipv6 = endpoint.count(":") > 1 and not endpoint.startswith("[")
        if is_bare_ipv6:
            endpoint = f"[{endpoint}]:{DEFAULT_PORT}"
        elif ":" not in endpoint:
            endpoint = f"{endpoint}:{DEFAULT_PORT}"
        normalized.append(endpoint)
    return tuple(normalized)


def _validator_seeds(_inst: Any, _attr: Attribute, value: Tuple[str, ...]) -> None:
    if not value:
        raise ValueError("At least one seed address is required")
    for endpoint in value:
        PeerKey.from_endpoint(endpoint, DIRECTION_OUTBOUND)


def _validator_max_outbound(_inst: Any, _attr: Attribute, value: int) -> None:
    if not 1 <= value <= MAX_OUTBOUND_LIMIT:
        raise ValueError(f"max_outbound must be between 1 and {MAX_OUTBOUND_LIMIT}: {value}")


def _validator_optional_positive(_inst: Any, attr: Attribute, value: Optional[float]) -> None:
    if value is not None and not value > 0:
        raise ValueError(f"{attr.name} must be positive: {value}")


@attrs(frozen=True, slots=True)
class SensorConfig:
    seeds: Tuple[str, ...] = attrib(converter=_normalize_endpoints, validator=_validator_seeds)
    output: PathType = attrib()
    max_outbound: int = attrib(default=MAX_OUTBOUND_LIMIT, validator=_validator_max_outbound)
    user_agent: str = attrib(default=DEFAULT_USER_AGENT)
    protocol_version: int = attrib(default=PROTOCOL_VERSION)
    magic: bytes = attrib(default=MAINNET_MAGIC)
    connect_timeout_s: float = attrib(default=10.0, validator=validator_positive)
    handshake_timeout_s: float = attrib(default=10.0, validator=validator_positive)
    ping_interval_s: float = attrib(default=120.0, validator=validator_positive)
    redial_delay_s: float = attrib(default=5.0, validator=validator_positive)
    # Stop after this many seconds; None runs until cancelled
    run_seconds: Optional[float] = attrib(
        default=None, validator=_validator_optional_positive
    )
    append: bool = attrib(default=False)


@attrs
class SensorStats:
    dials: int = attrib(default=0)
    dial_failures: int = attrib(default=0)
    sessions: int = attrib(default=0)
    suppressed_dials: int = attrib(default=0)
    corrupt_frames: int = attrib(default=0)
    events_written: int = attrib(default=0)


class OutboundLimiter:
    """Counts open outbound sessions and refuses to go past the limit."""

    def __init__(self, limit: int) -> None:
        self.limit = limit
        self._open = 0

    @property
    def open_count(self) -> int:
        return self._open

    def try_acquire(self) -> bool:
        if self._open >= self.limit:
            return False
        self._open += 1
        return True

    def release(self) -> None:
        assert self._open > 0, "Released more sessions than were acquired"
        self._open -= 1


class _HandshakeTimeout(Exception):
    pass


_QueueItem = Optional[Tuple[PeerKey, str, Optional[Payload]]]


class Sensor:
    """Live collector that keeps up to max_outbound sessions and writes one trace.

    Session handlers only enqueue observations. A single writer task stamps each one
    when it is received and appends it to the trace, so timestamps never decrease.
    """

    def __init__(self, config: SensorConfig, clock: Callable[[], float] = time.time) -> None:
        self.config = config
        self.stats = SensorStats()
        self.limiter = OutboundLimiter(config.max_outbound)
        self._clock = clock
        # Created by run so that it belongs to the running event loop
        self._queue: Optional["asyncio.Queue[_QueueItem]"] = None
        self._connected: Set[str] = set()
        self._seeds: Iterator[str] = cycle(config.seeds)
        self._last_ts: Optional[float] = None

    def _stamp(self) -> float:
        now = self._clock()
        if self._last_ts is not None and now < self._last_ts:
            now = self._last_ts
        self._last_ts = now
        return now

    def _emit(self, peer: PeerKey, kind: str, payload: Optional[Payload] = None) -> None:
        self._queue.put_nowait((peer, kind, payload))

    async def _write_events(self, output: TextIO) -> None:
        while True:
            item = await self._queue.get()
            if item is None:
                break
            peer, kind, payload = item
            event = ObservationEvent(self._stamp(), peer, kind, payload)
            print(format_event(event), file=output)
            output.flush()
            self.stats.events_written += 1

    def _next_endpoint(self) -> Optional[str]:
        for _ in range(len(self.config.seeds)):
            endpoint = next(self._seeds)
            if endpoint not in self._connected:
                return endpoint
        return None

    async def _dial_loop(self) -> None:
        while True:
            endpoint = self._next_endpoint()
            if endpoint is not None:
                if self.limiter.try_acquire():
                    self._connected.add(endpoint)
                    try:
                        await self._run_session(endpoint)
                    finally:
                        self._connected.discard(endpoint)
                        self.limiter.release()
                else:
                    self.stats.suppressed_dials += 1
                    logger.debug(
                        "Suppressed dial to %s with %d sessions open",
                        endpoint,
                        self.limiter.open_count,
                    )
            await asyncio.sleep(self.config.redial_delay_s)

    async def _run_session(self, endpoint: str) -> None:
        config = self.config
        peer = PeerKey.from_endpoint(endpoint, DIRECTION_OUTBOUND)
        self.stats.dials += 1
        dial_start = time.monotonic()
        try:
            reader, writer = await asyncio.wait_for(
                asyncio.open_connection(peer.address, peer.port), config.connect_timeout_s
            )
        except (OSError, asyncio.TimeoutError) as err:
            self.stats.dial_failures += 1
            logger.warning("Could not connect to %s: %s", endpoint, err or type(err).__name__)
            return

        connect_rtt_ms = (time.monotonic() - dial_start) * 1000.0
        self.stats.sessions += 1
        logger.info("Connected to %s", endpoint)
        self._emit(peer, KIND_CONNECT)
        self._emit(peer, KIND_PING_RTT, RttPayload(connect_rtt_ms))

        handler = _SessionHandler(self, peer, reader, writer)
        reason = REASON_SHUTDOWN
        try:
            reason = await handler.run()
        except (OSError, ConnectionError) as err:
            logger.warning("Connection to %s failed: %s", endpoint, err)
            reason = REASON_CONNECTION_ERROR
        except ValueError as err:
            # Includes WireFormatError from malformed payloads
            logger.warning("Protocol error from %s: %s", endpoint, err)
            reason = REASON_PROTOCOL_ERROR
        finally:
            self.stats.corrupt_frames += handler.stream.corrupt_frames
            self._emit(peer, KIND_DISCONNECT, DisconnectPayload(reason))
            logger.info("Disconnected from %s (%s)", endpoint, reason)
            writer.close()

    async def run(self) -> SensorStats:
        self._queue = asyncio.Queue()
        mode = "a" if self.config.append else "w"
        with open(self.config.output, mode, encoding=TRACE_ENCODING, newline="\n") as output:
            writer_task = asyncio.ensure_future(self._write_events(output))
            # One dial loop per seed; the limiter caps how many hold a session
            dialers = [
                asyncio.ensure_future(self._dial_loop()) for _ in range(len(self.config.seeds))
            ]
            try:
                if self.config.run_seconds is not None:
                    await asyncio.wait(dialers, timeout=self.config.run_seconds)
                else:
                    await asyncio.gather(*dialers)
            finally:
                for dialer in dialers:
                    dialer.cancel()
                await asyncio.gather(*dialers, return_exceptions=True)
                self._queue.put_nowait(None)
                await writer_task
        return self.stats


class _SessionHandler:
    def __init__(
        self,
        sensor: Sensor,
        peer: PeerKey,
        reader: asyncio.StreamReader,
        writer: asyncio.StreamWriter,
    ) -> None:
        self.sensor = sensor
        self.config = sensor.config
        self.peer = peer
        self.reader = reader
        self.writer = writer
        self.stream = MessageStream(self.config.magic)
        self.got_version = False
        self.got_verack = False
        self.height: Optional[int] = None
        self.headers_height: Optional[int] = None
        self.pending_pings: Dict[int, float] = {}

    def send(self, command: str, payload: bytes = b"") -> None:
        self.writer.write(encode_message(command, payload, self.config.magic))

    async def _read(self) -> Optional[List[WireMessage]]:
        data = await self.reader.read(READ_SIZE)
        if not data:
            return None
        return self.stream.feed(data)

    async def _handshake(self) -> bool:
        while not (self.got_version and self.got_verack):
            messages = await self._read()
            if messages is None:
                return False
            for message in messages:
                self.handle(message)
            await self.writer.drain()
        return True

    async def run(self) -> str:
        config = self.config
        self.send(
            COMMAND_VERSION,
            version_payload(
                _random_nonce(),
                int(time.time()),
                config.user_agent,
                protocol_version=config.protocol_version,
            ),
        )
        await self.writer.drain()
        try:
            completed = await asyncio.wait_for(self._handshake(), config.handshake_timeout_s)
        except asyncio.TimeoutError:
            logger.warning("Handshake with %s timed out", self.peer.endpoint())
            return REASON_HANDSHAKE_TIMEOUT
        if not completed:
            return REASON_PEER_CLOSED

        loop = asyncio.get_event_loop()
        next_ping = loop.time()
        while True:
            wait = next_ping - loop.time()
            if wait <= 0:
                self.ping()
                await self.writer.drain()
                next_ping += config.ping_interval_s
                continue
            try:
                messages = await asyncio.wait_for(self._read(), wait)
            except asyncio.TimeoutError:
                continue
            if messages is None:
                return REASON_PEER_CLOSED
            for message in messages:
                self.handle(message)
            await self.writer.drain()

    def ping(self) -> None:
        nonce = _random_nonce()
        self.pending_pings[nonce] = time.monotonic()
        self.send(COMMAND_PING, nonce_payload(nonce))

    def handle(self, message: WireMessage) -> None:
        command = message.command
        emit = self.sensor._emit
        peer = self.peer
        if command == COMMAND_VERSION:
            self.got_version = True
            self.height = parse_version_start_height(message.payload)
            self.headers_height = self.height
            emit(peer, KIND_BLOCK_HEIGHT, HeightPayload(max(0, self.height)))
            self.send(COMMAND_VERACK)
        elif command == COMMAND_VERACK:
            self.got_verack = True
        elif command == COMMAND_PING:
            # Echo the nonce back unchanged
            self.send(COMMAND_PONG, message.payload[:8])
        elif command == COMMAND_PONG:
            sent = self.pending_pings.pop(parse_nonce(message.payload), None)
            if sent is not None:
                rtt_ms = (time.monotonic() - sent) * 1000.0
                emit(peer, KIND_PROTO_PING_RTT, RttPayload(rtt_ms))
        elif command == COMMAND_INV:
            for inv_type, inv_hash in parse_inv(message.payload):
                if inv_type in BLOCK_INV_TYPES:
                    # Announced blocks are assumed to extend the peer's best chain
                    self.height = (self.height or 0) + 1
                    emit(peer, KIND_BLOCK, BlockPayload(inv_hash, self.height))
                elif inv_type in TX_INV_TYPES:
                    emit(
                        peer,
                        KIND_TX,
                        TxPayload(inv_hash, UNKNOWN_FEE, UNKNOWN_SIZE, fee_unknown=True),
                    )
        elif command in (COMMAND_ADDR, COMMAND_ADDRV2):
            emit(peer, KIND_ADDR, AddrPayload(parse_count(message.payload)))
        elif command == COMMAND_HEADERS:
            count = parse_count(message.payload)
            if count:
                self.headers_height = (self.headers_height or 0) + count
                emit(peer, KIND_HEADERS_HEIGHT, HeightPayload(self.headers_height))
        elif command == COMMAND_FEEFILTER:
            emit(peer, KIND_FEEFILTER, FeeFilterPayload(parse_feefilter(message.payload)))
        elif len(command) <= MAX_COMMAND_LEN and not any(c.isspace() for c in command):
            emit(peer, KIND_MSG, MsgPayload(command))


def _random_nonce() -> int:
    return int.from_bytes(os.urandom(8), "little")


def run_sensor(config: SensorConfig) -> SensorStats:
    """Collect a live trace until run_seconds elapse or the process is interrupted."""
    return asyncio.run(Sensor(config).run())
