import json
import logging
import math
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from attr import Attribute, attrib, attrs, evolve, fields_dict

from peerscore.model import (
    DIRECTION_INBOUND,
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
    TIMESTAMP_DECIMALS,
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
from peerscore.scoring import DECAY_INCREMENT, ScoreConfig
from peerscore.util import PathType

logger = logging.getLogger(__name__)

DEFAULT_START_TS = 1_700_000_000.0
DEFAULT_START_HEIGHT = 800_000
MAINNET_PORT = 8333
EPHEMERAL_PORT_LOW = 49152
EPHEMERAL_PORT_HIGH = 65536

SHORT_LIVED_DURATION_S = 0.5
INITIAL_FILL_SPACING_S = 1e-3
# Floor on the quality coupling so that low-quality peers keep a sensible median
MIN_DURATION_FACTOR = 0.25
HANDSHAKE_REPORT_DELAY_S = 0.1
FEEFILTER_DELAY_S = 0.2
PROTO_PING_OFFSET_S = 1e-3
BLOCK_HEIGHT_LAG_FACTOR = 1.5
MAX_ADDR_COUNT = 1000

REASON_PEER_CLOSED = "peer_closed"
REASON_END_OF_TRACE = "end_of_trace"

MSG_COMMANDS = (
    "inv",
    "getdata",
    "getheaders",
    "sendheaders",
    "sendcmpct",
    "notfound",
    "wtxidrelay",
    "getaddr",
)
FEE_FILTER_RATES = (1.0, 1.0, 1.0, 2.0, 5.0, 10.0)
# IPv4, IPv6, onion
ADDRESS_FAMILY_WEIGHTS = (0.7, 0.2, 0.1)
ONION_ALPHABET = "abcdefghijklmnopqrstuvwxyz234567"
ONION_LENGTH = 56

# Sort rank within one timestamp: sessions open before activity and close after it
_RANK_CONNECT = 0
_RANK_ACTIVITY = 1
_RANK_DISCONNECT = 2


class ScenarioError(ValueError):
    def __init__(self, field: str, msg: str) -> None:
        super().__init__(f"Invalid scenario field {field}: {msg}")
        self.field: str = field


def _check_number(attr: Attribute, value: Any) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(attr.name, f"expected a number, got {repr(value)}")
    if not math.isfinite(value):
        raise ScenarioError(attr.name, f"must be finite, got {repr(value)}")


def _check_int(attr: Attribute, value: Any) -> None:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ScenarioError(attr.name, f"expected an integer, got {repr(value)}")


def _positive(_inst: Any, attr: Attribute, value: Any) -> None:
    _check_number(attr, value)
    if not value > 0:
        raise ScenarioError(attr.name, f"must be positive, got {repr(value)}")


def _nonnegative(_inst: Any, attr: Attribute, value: Any) -> None:
    _check_number(attr, value)
    if not value >= 0:
        raise ScenarioError(attr.name, f"must be nonnegative, got {repr(value)}")


def _fraction(_inst: Any, attr: Attribute, value: Any) -> None:
    _check_number(attr, value)
    if not 0.0 <= value <= 1.0:
        raise ScenarioError(attr.name, f"must be in [0, 1], got {repr(value)}")


def _positive_int(_inst: Any, attr: Attribute, value: Any) -> None:
    _check_int(attr, value)
    if not value >= 1:
        raise ScenarioError(attr.name, f"must be at least 1, got {repr(value)}")


def _nonnegative_int(_inst: Any, attr: Attribute, value: Any) -> None:
    _check_int(attr, value)
    if not value >= 0:
        raise ScenarioError(attr.name, f"must be nonnegative, got {repr(value)}")


def _any_int(_inst: Any, attr: Attribute, value: Any) -> None:
    _check_int(attr, value)


def _optional_weights(value: Any) -> Any:
    if isinstance(value, (list, tuple)):
        return tuple(value)
    return value


def _quality_weights(_inst: Any, attr: Attribute, value: Any) -> None:
    if value is None:
        return
    if not isinstance(value, tuple):
        raise ScenarioError(attr.name, f"expected a list of weights, got {repr(value)}")
    for weight in value:
        _nonnegative(_inst, attr, weight)
    if not sum(value) > 0:
        raise ScenarioError(attr.name, "at least one weight must be positive")


@attrs(frozen=True, slots=True)
class Scenario:
    duration_s: float = attrib(default=6 * 3600.0, validator=_nonnegative)
    max_concurrent_peers: int = attrib(default=10, validator=_positive_int)
    peer_arrival_rate: float = attrib(default=0.05, validator=_positive)
    session_median_s: float = attrib(default=1200.0, validator=_positive)
    session_sigma: float = attrib(default=1.0, validator=_nonnegative)
    quality_duration_coupling: float = attrib(default=1.0, validator=_nonnegative)
    short_lived_fraction: float = attrib(default=0.1, validator=_fraction)
    block_interval_s: float = attrib(default=600.0, validator=_positive)
    tx_rate_per_s: float = attrib(default=5.0, validator=_positive)
    fee_median_sat: float = attrib(default=2000.0, validator=_positive)
    fee_sigma: float = attrib(default=1.0, validator=_nonnegative)
    tx_size_median_bytes: float = attrib(default=250.0, validator=_positive)
    tx_size_sigma: float = attrib(default=0.5, validator=_nonnegative)
    echo_probability: float = attrib(default=0.5, validator=_fraction)
    echo_delay_mean_s: float = attrib(default=0.2, validator=_positive)
    peer_pool_size: int = attrib(default=30, validator=_positive_int)
    quality_concentration: float = attrib(default=1.0, validator=_positive)
    peer_quality: Optional[Tuple[float, ...]] = attrib(
        default=None, converter=_optional_weights, validator=_quality_weights
    )
    rtt_base_ms: float = attrib(default=80.0, validator=_positive)
    rtt_jitter_ms: float = attrib(default=20.0, validator=_nonnegative)
    ping_interval_s: float = attrib(default=120.0, validator=_positive)
    height_lag_mean_s: float = attrib(default=2.0, validator=_positive)
    addr_rate_per_s: float = attrib(default=0.01, validator=_positive)
    msg_rate_per_s: float = attrib(default=0.1, validator=_positive)
    inbound_fraction: float = attrib(default=0.0, validator=_fraction)
    start_ts: float = attrib(default=DEFAULT_START_TS, validator=_nonnegative)
    start_height: int = attrib(default=DEFAULT_START_HEIGHT, validator=_nonnegative_int)
    seed: int = attrib(default=42, validator=_any_int)

    def __attrs_post_init__(self) -> None:
        if self.peer_quality is not None and len(self.peer_quality) != self.peer_pool_size:
            raise ScenarioError(
                "peer_quality",
                f"has {len(self.peer_quality)} weights but peer_pool_size is "
                f"{self.peer_pool_size}; give one weight per pool peer",
            )

    @property
    def end_ts(self) -> float:
        return self.start_ts + self.duration_s

    @property
    def mean_fee_sat(self) -> float:
        """Mean of the log-normal fee distribution."""
        return self.fee_median_sat * math.exp(self.fee_sigma**2 / 2)

    def with_overrides(self, **overrides: Any) -> "Scenario":
        unknown = sorted(set(overrides) - set(fields_dict(Scenario)))
        if unknown:
            raise ScenarioError(unknown[0], "is not a scenario field")
        return evolve(self, **overrides)


DEFAULT_SCENARIO = Scenario()


def load_scenario(path: PathType, encoding: str = "utf8") -> Scenario:
    """Load a scenario from a JSON object whose keys are Scenario field names."""
    try:
        with open(path, encoding=encoding) as file:
            data = json.load(file)
    except FileNotFoundError as err:
        raise ValueError(f"Could not open scenario file {repr(str(path))}") from err
    except json.decoder.JSONDecodeError as err:
        raise ValueError(f"Scenario file {repr(str(path))} is not valid JSON") from err

    if not isinstance(data, dict):
        raise ValueError(f"Scenario file {repr(str(path))} does not contain a JSON object")

    known = fields_dict(Scenario)
    for key in data:
        if key not in known:
            raise ScenarioError(
                key, f"is not a scenario field; expected one of {', '.join(sorted(known))}"
            )
    return Scenario(**data)


@attrs(frozen=True, slots=True)
class SessionRecord:
    peer: PeerKey = attrib()
    pool_index: int = attrib()
    start: float = attrib()
    end: float = attrib()
    short_lived: bool = attrib()
    truncated: bool = attrib()

    @property
    def duration(self) -> float:
        return self.end - self.start

    def contains(self, ts: float) -> bool:
        """Return whether ts falls strictly inside the session."""
        return self.start < ts < self.end


@attrs(frozen=True)
class GroundTruth:
    # Keyed by peer address; weights sum to one over the pool
    quality: Dict[str, float] = attrib()
    # Keyed by block or transaction hash
    first_deliverers: Dict[str, PeerKey] = attrib()
    sessions: Tuple[SessionRecord, ...] = attrib(converter=tuple)
    block_times: Tuple[float, ...] = attrib(converter=tuple)
    tx_count: int = attrib()

    def quality_of(self, address: str) -> float:
        return self.quality.get(address, 0.0)


def arrival_times(
    rng: np.random.Generator, rate: float, start: float, end: float
) -> np.ndarray:
    """Return the points of a homogeneous Poisson process on [start, end)."""
    if end <= start:
        return np.zeros(0, dtype=float)
    chunks = []
    batch = max(16, int(rate * (end - start) * 1.1) + 16)
    t = start
    while True:
        points = t + np.cumsum(rng.exponential(1.0 / rate, size=batch))
        inside = points[points < end]
        chunks.append(inside)
        if len(inside) < batch:
            break
        t = float(points[-1])
    return np.concatenate(chunks)


def _round_ts(ts: float) -> float:
    return round(float(ts), TIMESTAMP_DECIMALS)


def _address_pool(rng: np.random.Generator, size: int) -> List[str]:
    addresses: List[str] = []
    seen = set()
    while len(addresses) < size:
        family = rng.choice(len(ADDRESS_FAMILY_WEIGHTS), p=ADDRESS_FAMILY_WEIGHTS)
        if family == 0:
            octets = [
                rng.integers(1, 224),
                rng.integers(0, 256),
                rng.integers(0, 256),
                rng.integers(1, 255),
            ]
            address = ".".join(str(octet) for octet in octets)
        elif family == 1:
            address = f"2001:db8:{rng.integers(1, 0x10000):x}::{rng.integers(1, 0x10000):x}"
        else:
            letters = rng.integers(0, len(ONION_ALPHABET), size=ONION_LENGTH)
            address = "".join(ONION_ALPHABET[idx] for idx in letters) + ".onion"
        if address not in seen:
            seen.add(address)
            addresses.append(address)
    return addresses


class _TraceBuilder:
    def __init__(self) -> None:
        self._entries: List[Tuple[float, int, int, ObservationEvent]] = []

    def add(
        self, ts: float, peer: PeerKey, kind: str, payload: Optional[Payload] = None
    ) -> None:
        event = ObservationEvent(ts, peer, kind, payload)
        if kind == KIND_CONNECT:
            rank = _RANK_CONNECT
        elif kind == KIND_DISCONNECT:
            rank = _RANK_DISCONNECT
        else:
            rank = _RANK_ACTIVITY
        self._entries.append((event.ts, rank, len(self._entries), event))

    def add_inside(
        self, session: SessionRecord, ts: float, kind: str, payload: Optional[Payload] = None
    ) -> None:
        if session.contains(_round_ts(ts)):
            self.add(ts, session.peer, kind, payload)

    def events(self) -> List[ObservationEvent]:
        return [entry[-1] for entry in sorted(self._entries, key=lambda entry: entry[:3])]


class _Simulation:
    def __init__(self, scenario: Scenario) -> None:
        self.scenario = scenario
        self.rng = np.random.default_rng(scenario.seed)
        self.builder = _TraceBuilder()
        n = scenario.peer_pool_size

        self.pool = _address_pool(self.rng, n)
        if scenario.peer_quality is not None:
            weights = np.asarray(scenario.peer_quality, dtype=float)
            self.quality = weights / weights.sum()
        else:
            self.quality = self.rng.dirichlet(np.full(n, scenario.quality_concentration))
        self.rtt_base = self.rng.lognormal(math.log(scenario.rtt_base_ms), 0.5, size=n)
        self.height_lag = self.rng.exponential(scenario.height_lag_mean_s, size=n)
        self.fee_filter = self.rng.choice(FEE_FILTER_RATES, size=n)

    def duration_for(self, pool_index: int) -> Tuple[float, bool]:
        scenario = self.scenario
        if self.rng.random() < scenario.short_lived_fraction:
            return SHORT_LIVED_DURATION_S, True
        relative_quality = self.quality[pool_index] * scenario.peer_pool_size
        factor = max(
            MIN_DURATION_FACTOR,
            1.0 + scenario.quality_duration_coupling * (relative_quality - 1.0),
        )
        median = scenario.session_median_s * factor
        return float(self.rng.lognormal(math.log(median), scenario.session_sigma)), False

    def schedule_sessions(self) -> List[SessionRecord]:
        scenario = self.scenario
        end = _round_ts(scenario.end_ts)
        sessions: List[SessionRecord] = []
        active: List[SessionRecord] = []

        def release(t: float) -> None:
            # A slot is free only once its session has ended strictly before t
            active[:] = [session for session in active if not session.end < t]

        def open_session(t: float) -> None:
            connected = {session.pool_index for session in active}
            available = [idx for idx in range(scenario.peer_pool_size) if idx not in connected]
            if not available or len(active) >= scenario.max_concurrent_peers:
                return
            pool_index = available[int(self.rng.integers(len(available)))]
            if self.rng.random() < scenario.inbound_fraction:
                port = int(self.rng.integers(EPHEMERAL_PORT_LOW, EPHEMERAL_PORT_HIGH))
                direction = DIRECTION_INBOUND
            else:
                port = MAINNET_PORT
                direction = DIRECTION_OUTBOUND
            duration, short_lived = self.duration_for(pool_index)
            session_end = _round_ts(min(t + duration, end))
            session = SessionRecord(
                PeerKey(self.pool[pool_index], port, direction),
                pool_index,
                t,
                session_end,
                short_lived,
                t + duration > end,
            )
            sessions.append(session)
            active.append(session)

        for slot in range(scenario.max_concurrent_peers):
            t = _round_ts(min(scenario.start_ts + slot * INITIAL_FILL_SPACING_S, end))
            release(t)
            open_session(t)

        for arrival in arrival_times(
            self.rng, scenario.peer_arrival_rate, scenario.start_ts, scenario.end_ts
        ):
            t = _round_ts(arrival)
            release(t)
            open_session(t)

        return sessions

    def deliver(
        self,
        sessions: Sequence[SessionRecord],
        block_times: np.ndarray,
        tx_times: np.ndarray,
    ) -> Dict[str, PeerKey]:
        scenario = self.scenario
        rng = self.rng
        fees = np.rint(
            rng.lognormal(math.log(scenario.fee_median_sat), scenario.fee_sigma, len(tx_times))
        ).astype(int)
        sizes = np.maximum(
            1,
            np.rint(
                rng.lognormal(
                    math.log(scenario.tx_size_median_bytes), scenario.tx_size_sigma, len(tx_times)
                )
            ).astype(int),
        )

        # Blocks sort before transactions that share a timestamp
        items = [(float(t), 0, idx) for idx, t in enumerate(block_times)]
        items.extend((float(t), 1, idx) for idx, t in enumerate(tx_times))
        items.sort()

        first_deliverers: Dict[str, PeerKey] = {}
        ordered = sorted(sessions, key=lambda session: session.start)
        pointer = 0
        active: List[SessionRecord] = []
        for t, item_type, idx in items:
            t_r = _round_ts(t)
            while pointer < len(ordered) and ordered[pointer].start < t_r:
                active.append(ordered[pointer])
                pointer += 1
            active = [session for session in active if session.end > t_r]
            if not active:
                continue

            weights = np.array([self.quality[session.pool_index] for session in active])
            total = weights.sum()
            probs = weights / total if total > 0 else np.full(len(active), 1.0 / len(active))
            first = active[int(rng.choice(len(active), p=probs))]

            item_hash = rng.bytes(32).hex()
            payload: Payload
            if item_type == 0:
                kind = KIND_BLOCK
                height = scenario.start_height + idx + 1
                payload = BlockPayload(item_hash, height)
            else:
                kind = KIND_TX
                payload = TxPayload(item_hash, int(fees[idx]), int(sizes[idx]))
            self.builder.add(t, first.peer, kind, payload)
            first_deliverers[item_hash] = first.peer

            for session in active:
                if session is not first and rng.random() < scenario.echo_probability:
                    echo_ts = t + rng.exponential(scenario.echo_delay_mean_s)
                    self.builder.add_inside(session, echo_ts, kind, payload)

            if item_type == 0:
                for session in active:
                    lag = self.height_lag[session.pool_index]
                    self.builder.add_inside(
                        session, t + lag, KIND_HEADERS_HEIGHT, HeightPayload(height)
                    )
                    self.builder.add_inside(
                        session,
                        t + lag * BLOCK_HEIGHT_LAG_FACTOR,
                        KIND_BLOCK_HEIGHT,
                        HeightPayload(height),
                    )

        return first_deliverers

    def session_activity(self, session: SessionRecord, block_times: np.ndarray) -> None:
        scenario = self.scenario
        rng = self.rng
        builder = self.builder
        idx = session.pool_index

        builder.add(session.start, session.peer, KIND_CONNECT)
        reason = REASON_END_OF_TRACE if session.truncated else REASON_PEER_CLOSED
        builder.add(session.end, session.peer, KIND_DISCONNECT, DisconnectPayload(reason))

        report_ts = session.start + HANDSHAKE_REPORT_DELAY_S
        height = scenario.start_height + int(np.searchsorted(block_times, report_ts, "right"))
        builder.add_inside(session, report_ts, KIND_HEADERS_HEIGHT, HeightPayload(height))
        builder.add_inside(
            session,
            session.start + FEEFILTER_DELAY_S,
            KIND_FEEFILTER,
            FeeFilterPayload(float(self.fee_filter[idx])),
        )

        ping_ts = session.start + scenario.ping_interval_s
        while ping_ts < session.end:
            rtt = self.rtt_base[idx] + abs(rng.normal(0.0, scenario.rtt_jitter_ms))
            builder.add_inside(session, ping_ts, KIND_PING_RTT, RttPayload(rtt))
            proto_rtt = rtt + abs(rng.normal(0.0, scenario.rtt_jitter_ms / 2))
            builder.add_inside(
                session, ping_ts + PROTO_PING_OFFSET_S, KIND_PROTO_PING_RTT, RttPayload(proto_rtt)
            )
            ping_ts += scenario.ping_interval_s

        for addr_ts in arrival_times(rng, scenario.addr_rate_per_s, session.start, session.end):
            count = int(rng.integers(1, MAX_ADDR_COUNT + 1))
            builder.add_inside(session, addr_ts, KIND_ADDR, AddrPayload(count))

        for msg_ts in arrival_times(rng, scenario.msg_rate_per_s, session.start, session.end):
            command = MSG_COMMANDS[int(rng.integers(len(MSG_COMMANDS)))]
            builder.add_inside(session, msg_ts, KIND_MSG, MsgPayload(command))

    def run(self) -> Tuple[List[ObservationEvent], GroundTruth]:
        scenario = self.scenario
        sessions = self.schedule_sessions()
        block_times = arrival_times(
            self.rng, 1.0 / scenario.block_interval_s, scenario.start_ts, scenario.end_ts
        )
        tx_times = arrival_times(
            self.rng, scenario.tx_rate_per_s, scenario.start_ts, scenario.end_ts
        )
        first_deliverers = self.deliver(sessions, block_times, tx_times)
        for session in sessions:
            self.session_activity(session, block_times)

        events = self.builder.events()
        truth = GroundTruth(
            {address: float(weight) for address, weight in zip(self.pool, self.quality)},
            first_deliverers,
            sessions,
            [float(t) for t in block_times],
            len(tx_times),
        )
        logger.info(
            "Simulated %d events over %g s: %d sessions, %d blocks, %d transactions",
            len(events),
            scenario.duration_s,
            len(sessions),
            len(block_times),
            len(tx_times),
        )
        return events, truth


def simulate(scenario: Scenario) -> Tuple[List[ObservationEvent], GroundTruth]:
    """Generate a trace and the ground truth used to generate it.

    The same scenario, including its seed, always produces the same events.
    """
    return _Simulation(scenario).run()


def expected_scores(
    ground_truth: GroundTruth, scenario: Scenario, config: ScoreConfig
) -> Dict[str, np.ndarray]:
    """Return each pool peer's expected score after every full window.

    The expectation assumes the peer is connected throughout, with its quality weight
    as its share of first deliveries. Only increment mode has this closed form.
    """
    if config.decay_mode != DECAY_INCREMENT:
        raise ValueError(
            f"Expected scores are only defined for decay mode {DECAY_INCREMENT}, "
            f"not {config.decay_mode}"
        )
    window = config.window_seconds
    n_windows = int(math.floor(scenario.duration_s / window + 1e-9))
    steps = np.arange(1, n_windows + 1, dtype=float)
    trajectories = {}
    for address, quality in ground_truth.quality.items():
        blocks = quality * window / scenario.block_interval_s
        fees = quality * scenario.tx_rate_per_s * window * scenario.mean_fee_sat / config.fee_scale
        increment = config.gamma * (config.w_block * blocks + config.w_tx * fees)
        trajectories[address] = increment * steps
    return trajectories


def session_counts(events: Iterable[ObservationEvent]) -> List[Tuple[float, int]]:
    """Return (timestamp, open session count) after every session boundary."""
    counts = []
    open_count = 0
    for event in events:
        if event.kind == KIND_CONNECT:
            open_count += 1
            counts.append((event.ts, open_count))
        elif event.kind == KIND_DISCONNECT:
            open_count -= 1
            counts.append((event.ts, open_count))
    return counts
