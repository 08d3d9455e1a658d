import math
from threading import Lock
from typing import Any, Dict, Iterable, List, Optional, Protocol, Set, Tuple

from attr import Attribute, Factory, attrib, attrs

from peerscore.model import (
    KIND_BLOCK,
    KIND_CONNECT,
    KIND_DISCONNECT,
    KIND_TX,
    BlockPayload,
    ObservationEvent,
    PeerKey,
    TraceOrderError,
    TxPayload,
)

DECAY_INCREMENT = "increment"
DECAY_PRIOR = "prior"
SUPPORTED_DECAY_MODES = (DECAY_INCREMENT, DECAY_PRIOR)

IDENTITY_ADDRESS_ONLY = "address_only"
IDENTITY_ADDRESS_AND_PORT = "address_and_port"
SUPPORTED_IDENTITY_MODES = (IDENTITY_ADDRESS_ONLY, IDENTITY_ADDRESS_AND_PORT)

# Raw satoshi, and a preset that brings per-window fee sums near block counts
FEE_SCALE_SATOSHI = 1.0
FEE_SCALE_PRESET = 1e4

DEFAULT_GAMMA = 1.0
DEFAULT_W_BLOCK = 0.5
DEFAULT_WINDOW_SECONDS = 1.0


class SessionError(ValueError):
    pass


def _validator_gamma(_inst: Any, _attr: Attribute, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"gamma out of range [0, 1]: {value}")


def _validator_w_block(_inst: Any, _attr: Attribute, value: float) -> None:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"w_block out of range [0, 1]: {value}")


def _validator_fee_scale(_inst: Any, _attr: Attribute, value: float) -> None:
    if not (value > 0 and math.isfinite(value)):
        raise ValueError(f"fee_scale must be positive: {value}")


def _validator_window_seconds(_inst: Any, _attr: Attribute, value: float) -> None:
    if not (value > 0 and math.isfinite(value)):
        raise ValueError(f"window_seconds must be positive: {value}")


def _validator_decay_mode(_inst: Any, _attr: Attribute, value: str) -> None:
    if value not in SUPPORTED_DECAY_MODES:
        raise ValueError(f"Unknown decay_mode {repr(value)}; expected one of {SUPPORTED_DECAY_MODES}")


def _validator_identity_mode(_inst: Any, _attr: Attribute, value: str) -> None:
    if value not in SUPPORTED_IDENTITY_MODES:
        raise ValueError(
            f"Unknown identity_mode {repr(value)}; expected one of {SUPPORTED_IDENTITY_MODES}"
        )


@attrs(frozen=True, slots=True)
class ScoreConfig:
    gamma: float = attrib(default=DEFAULT_GAMMA, converter=float, validator=_validator_gamma)
    w_block: float = attrib(
        default=DEFAULT_W_BLOCK, converter=float, validator=_validator_w_block
    )
    fee_scale: float = attrib(
        default=FEE_SCALE_SATOSHI, converter=float, validator=_validator_fee_scale
    )
    window_seconds: float = attrib(
        default=DEFAULT_WINDOW_SECONDS, converter=float, validator=_validator_window_seconds
    )
    decay_mode: str = attrib(default=DECAY_INCREMENT, validator=_validator_decay_mode)
    identity_mode: str = attrib(
        default=IDENTITY_ADDRESS_ONLY, validator=_validator_identity_mode
    )

    @property
    def w_tx(self) -> float:
        # Derived so the two weights always sum to one
        return 1.0 - self.w_block

    def identity(self, peer: PeerKey) -> str:
        if self.identity_mode == IDENTITY_ADDRESS_ONLY:
            return peer.address
        return peer.endpoint()

    def next_score(self, s_prev: float, f_block: float, f_fee: float) -> float:
        increment = self.w_block * f_block + self.w_tx * f_fee
        if self.decay_mode == DECAY_INCREMENT:
            return s_prev + self.gamma * increment
        else:
            return self.gamma * s_prev + increment


@attrs(frozen=True, slots=True)
class WindowMeasurement:
    f_block: int = attrib()
    f_fee: float = attrib()
    window_start: float = attrib()
    window_end: float = attrib()
    # Set for the final window of a session, which may be shorter than window_seconds
    partial: bool = attrib(default=False)

    @property
    def duration(self) -> float:
        return self.window_end - self.window_start


@attrs(frozen=True, slots=True)
class ScoreState:
    peer: str = attrib()
    s_prev: float = attrib()
    s_curr: float = attrib()
    last_update: float = attrib()

    def __attrs_post_init__(self) -> None:
        if not (math.isfinite(self.s_prev) and math.isfinite(self.s_curr)):
            raise ValueError(f"Scores for {self.peer} must be finite")


@attrs
class NoveltyLedger:
    """Node-global record of every block and transaction hash seen so far."""

    seen_blocks: Set[str] = attrib(default=Factory(set))
    seen_txs: Set[str] = attrib(default=Factory(set))

    def claim_block(self, block_hash: str) -> bool:
        """Record a block hash, returning whether it was new."""
        if block_hash in self.seen_blocks:
            return False
        self.seen_blocks.add(block_hash)
        return True

    def claim_tx(self, tx_hash: str) -> bool:
        """Record a transaction hash, returning whether it was new."""
        if tx_hash in self.seen_txs:
            return False
        self.seen_txs.add(tx_hash)
        return True


class RemembranceStore:
    """Last known score state per remembrance identity.

    Entries survive disconnects and never expire within a run. Reads and writes
    take a lock so that lookups from other threads see a consistent state.
    """

    def __init__(self) -> None:
        self._states: Dict[str, ScoreState] = {}
        self._lock = Lock()

    def checkpoint(self, state: ScoreState) -> None:
        with self._lock:
            self._states[state.peer] = state

    def get(self, identity: str) -> Optional[ScoreState]:
        with self._lock:
            return self._states.get(identity)

    def lookup(self, identity: str) -> float:
        state = self.get(identity)
        return state.s_curr if state is not None else 0.0

    def identities(self) -> List[str]:
        with self._lock:
            return sorted(self._states)

    def __len__(self) -> int:
        with self._lock:
            return len(self._states)


@attrs
class _OpenSession:
    peer: PeerKey = attrib()
    identity: str = attrib()
    connect_ts: float = attrib()
    window_start: float = attrib()
    score: float = attrib()
    last_update: float = attrib()
    f_block: int = attrib(default=0)
    f_fee: float = attrib(default=0.0)
    # Activity events applied since the current window started
    applied: int = attrib(default=0)


class ScoreEngine:
    """Applies observation events in timestamp order and produces window scores.

    The engine is a single writer: callers must serialize observe and close_window.
    """

    def __init__(self, config: ScoreConfig) -> None:
        self.config: ScoreConfig = config
        self.ledger: NoveltyLedger = NoveltyLedger()
        self.store: RemembranceStore = RemembranceStore()
        self._sessions: Dict[PeerKey, _OpenSession] = {}

    @property
    def active_peers(self) -> List[PeerKey]:
        return list(self._sessions)

    def is_connected(self, peer: PeerKey) -> bool:
        return peer in self._sessions

    def _session(self, peer: PeerKey, action: str) -> _OpenSession:
        try:
            return self._sessions[peer]
        except KeyError:
            raise SessionError(
                f"Cannot {action} for {peer}: no open session. "
                "Every peer's activity must follow a CONNECT and precede its DISCONNECT."
            ) from None

    def observe(self, event: ObservationEvent) -> None:
        peer = event.peer
        if event.kind == KIND_CONNECT:
            if peer in self._sessions:
                raise SessionError(f"Nested session: {peer} is already connected")
            identity = self.config.identity(peer)
            self._sessions[peer] = _OpenSession(
                peer,
                identity,
                event.ts,
                event.ts,
                self.store.lookup(identity),
                event.ts,
            )
        elif event.kind == KIND_DISCONNECT:
            session = self._session(peer, "disconnect")
            self.store.checkpoint(self._state(session, session.score, event.ts))
            del self._sessions[peer]
        else:
            session = self._session(peer, f"apply {event.kind}")
            session.applied += 1
            if event.kind == KIND_BLOCK:
                assert isinstance(event.payload, BlockPayload)
                if self.ledger.claim_block(event.payload.hash):
                    session.f_block += 1
            elif event.kind == KIND_TX:
                assert isinstance(event.payload, TxPayload)
                if self.ledger.claim_tx(event.payload.hash):
                    session.f_fee += event.payload.fee / self.config.fee_scale

    def close_window(
        self, peer: PeerKey, t: float, *, partial: bool = False
    ) -> Tuple[ScoreState, WindowMeasurement]:
        session = self._session(peer, "close a window")
        if t < session.last_update:
            raise ValueError(
                f"Cannot close a window for {peer} at {t}, before its last update "
                f"at {session.last_update}"
            )

        measurement = WindowMeasurement(
            session.f_block, session.f_fee, session.window_start, t, partial
        )
        s_prev = session.score
        s_curr = self.config.next_score(s_prev, session.f_block, session.f_fee)
        state = ScoreState(session.identity, s_prev, s_curr, t)

        session.score = s_curr
        session.last_update = t
        session.window_start = t
        session.f_block = 0
        session.f_fee = 0.0
        session.applied = 0
        self.store.checkpoint(state)
        return state, measurement

    def remembrance_lookup(self, identity: str) -> float:
        return self.store.lookup(identity)

    def has_pending(self, peer: PeerKey) -> bool:
        """Return whether events were applied to the peer's current window."""
        return self._session(peer, "check a window").applied > 0

    @staticmethod
    def _state(session: _OpenSession, score: float, ts: float) -> ScoreState:
        return ScoreState(session.identity, score, score, ts)


def new_engine(config: ScoreConfig) -> ScoreEngine:
    if not isinstance(config, ScoreConfig):
        raise TypeError(f"Expected a ScoreConfig, got {type(config).__name__}")
    return ScoreEngine(config)


@attrs(frozen=True, slots=True)
class WindowRecord:
    peer: PeerKey = attrib()
    state: ScoreState = attrib()
    measurement: WindowMeasurement = attrib()
    session_start: float = attrib()

    @property
    def identity(self) -> str:
        return self.state.peer


class WindowObserver(Protocol):
    def event_applied(self, event: ObservationEvent) -> None:
        raise NotImplementedError

    def window_closed(self, record: WindowRecord) -> None:
        raise NotImplementedError


@attrs
class _WindowClock:
    session_start: float = attrib()
    window_seconds: float = attrib()
    windows: int = attrib(default=0)

    def current_start(self) -> float:
        return self.session_start + self.windows * self.window_seconds

    def next_end(self) -> float:
        # Computed from the session start so that windows don't drift
        return self.session_start + (self.windows + 1) * self.window_seconds


def score_trace(
    events: Iterable[ObservationEvent],
    config: ScoreConfig,
    *,
    observer: Optional[WindowObserver] = None,
) -> List[WindowRecord]:
    """Replay a trace through a fresh engine and return every closed window.

    Windows are aligned to each session's CONNECT and closed before any event at or
    after their end is applied. A DISCONNECT closes a final partial window, and
    sessions still open at the end of the trace are closed at its last timestamp.
    """
    engine = new_engine(config)
    records: List[WindowRecord] = []
    clocks: Dict[PeerKey, _WindowClock] = {}
    next_due = math.inf
    prev_ts: Optional[float] = None

    def close(peer: PeerKey, clock: _WindowClock, end: float, partial: bool) -> None:
        state, measurement = engine.close_window(peer, end, partial=partial)
        record = WindowRecord(peer, state, measurement, clock.session_start)
        records.append(record)
        clock.windows += 1
        if observer is not None:
            observer.window_closed(record)

    def close_due(ts: float) -> float:
        earliest = math.inf
        for peer, clock in clocks.items():
            while clock.next_end() <= ts:
                close(peer, clock, clock.next_end(), False)
            earliest = min(earliest, clock.next_end())
        return earliest

    def close_final(peer: PeerKey, clock: _WindowClock, ts: float) -> None:
        # Emit the trailing partial window, including a zero-length one holding events
        # stamped on its start, and always at least one window per session
        if ts > clock.current_start() or clock.windows == 0 or engine.has_pending(peer):
            close(peer, clock, ts, True)

    for event in events:
        if prev_ts is not None and event.ts < prev_ts:
            raise TraceOrderError(
                f"Event at {event.ts} for {event.peer} precedes the previous event at {prev_ts}"
            )
        prev_ts = event.ts

        if event.ts >= next_due:
            next_due = close_due(event.ts)

        if event.kind == KIND_CONNECT:
            engine.observe(event)
            clock = _WindowClock(event.ts, config.window_seconds)
            clocks[event.peer] = clock
            next_due = min(next_due, clock.next_end())
        elif event.kind == KIND_DISCONNECT:
            if event.peer in clocks:
                close_final(event.peer, clocks.pop(event.peer), event.ts)
            engine.observe(event)
        else:
            engine.observe(event)

        if observer is not None:
            observer.event_applied(event)

    if clocks and prev_ts is not None:
        close_due(prev_ts)
        for peer, clock in list(clocks.items()):
            close_final(peer, clock, prev_ts)

    return records
