import os
from typing import Dict, List, Set, Tuple

import numpy as np
import pytest

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
from peerscore.scoring import (
    DECAY_PRIOR,
    IDENTITY_ADDRESS_AND_PORT,
    RemembranceStore,
    ScoreConfig,
    ScoreState,
    SessionError,
    WindowRecord,
    new_engine,
    score_trace,
)
from peerscore.simulator import DEFAULT_SCENARIO, simulate
from peerscore.trace import read_events

START = 1_700_000_000.0
PEER_A = PeerKey("10.0.0.1", 8333)
PEER_B = PeerKey("10.0.0.2", 8333)
GOLDEN_CONFIG = ScoreConfig(w_block=0.5, fee_scale=1000, window_seconds=10)
# Window start, end, partial flag, f_block, f_fee, s_prev and s_curr
WindowSummary = Tuple[float, float, bool, int, float, float, float]


def _block(ts: float, peer: PeerKey, tag: str) -> ObservationEvent:
    return ObservationEvent(START + ts, peer, KIND_BLOCK, BlockPayload(tag * 32, 800001))


def _tx(ts: float, peer: PeerKey, tag: str, fee: int) -> ObservationEvent:
    return ObservationEvent(START + ts, peer, KIND_TX, TxPayload(tag * 32, fee, 250))


def _session(ts: float, peer: PeerKey, kind: str) -> ObservationEvent:
    return ObservationEvent(START + ts, peer, kind)


def _summary(records: List[WindowRecord]) -> List[Tuple[str, float, float, float, bool]]:
    return [
        (
            record.peer.address,
            record.measurement.window_end - START,
            record.state.s_prev,
            record.state.s_curr,
            record.measurement.partial,
        )
        for record in records
    ]


def test_config_validation() -> None:
    config = ScoreConfig()
    assert config.w_block == 0.5
    assert config.w_tx == 0.5
    assert ScoreConfig(w_block=0.25).w_tx == 0.75
    with pytest.raises(ValueError):
        ScoreConfig(gamma=1.5)
    with pytest.raises(ValueError):
        ScoreConfig(w_block=-0.1)
    with pytest.raises(ValueError):
        ScoreConfig(window_seconds=0)
    with pytest.raises(ValueError):
        ScoreConfig(fee_scale=0)
    with pytest.raises(ValueError):
        ScoreConfig(decay_mode="exponential")
    with pytest.raises(ValueError):
        ScoreConfig(identity_mode="port_only")


def test_next_score() -> None:
    assert ScoreConfig(gamma=0.5, w_block=1.0).next_score(2.0, 1, 0.0) == 2.5
    assert ScoreConfig(gamma=0.5, w_block=1.0, decay_mode=DECAY_PRIOR).next_score(
        2.0, 1, 0.0
    ) == 2.0
    assert ScoreConfig(w_block=0.0).next_score(0.0, 5, 3.0) == 3.0


def test_identity() -> None:
    peer = PeerKey("10.0.0.1", 50000)
    assert ScoreConfig().identity(peer) == "10.0.0.1"
    assert ScoreConfig(identity_mode=IDENTITY_ADDRESS_AND_PORT).identity(peer) == "10.0.0.1:50000"


def test_score_state_must_be_finite() -> None:
    with pytest.raises(ValueError):
        ScoreState("10.0.0.1", float("nan"), 0.0, START)


def test_novelty_is_global() -> None:
    engine = new_engine(ScoreConfig(w_block=1.0, window_seconds=10))
    engine.observe(_session(0, PEER_A, KIND_CONNECT))
    engine.observe(_session(0, PEER_B, KIND_CONNECT))
    engine.observe(_block(1, PEER_A, "b1"))
    engine.observe(_block(2, PEER_B, "b1"))
    engine.observe(_block(3, PEER_B, "b2"))
    engine.observe(_tx(4, PEER_A, "a1", 500))
    engine.observe(_tx(5, PEER_B, "a1", 500))

    state_a, measurement_a = engine.close_window(PEER_A, START + 10)
    state_b, measurement_b = engine.close_window(PEER_B, START + 10)
    assert (measurement_a.f_block, measurement_a.f_fee) == (1, 500.0)
    assert (measurement_b.f_block, measurement_b.f_fee) == (1, 0.0)
    assert state_a.s_curr == 1.0
    assert state_b.s_curr == 1.0
    assert measurement_a.duration == 10.0


def test_window_resets_counts() -> None:
    engine = new_engine(ScoreConfig(w_block=1.0, window_seconds=10))
    engine.observe(_session(0, PEER_A, KIND_CONNECT))
    engine.observe(_block(1, PEER_A, "b1"))
    engine.close_window(PEER_A, START + 10)
    state, measurement = engine.close_window(PEER_A, START + 20)
    assert measurement.f_block == 0
    assert (state.s_prev, state.s_curr) == (1.0, 1.0)


def test_remembrance() -> None:
    engine = new_engine(ScoreConfig(w_block=1.0, window_seconds=10))
    engine.observe(_session(0, PEER_A, KIND_CONNECT))
    engine.observe(_block(1, PEER_A, "b1"))
    engine.close_window(PEER_A, START + 10)
    engine.observe(_session(11, PEER_A, KIND_DISCONNECT))
    assert not engine.is_connected(PEER_A)
    assert engine.remembrance_lookup("10.0.0.1") == 1.0
    assert engine.remembrance_lookup("10.0.0.9") == 0.0

    # Same address, new port
    engine.observe(_session(20, PeerKey("10.0.0.1", 50000), KIND_CONNECT))
    state, _ = engine.close_window(PeerKey("10.0.0.1", 50000), START + 30)
    assert state.s_prev == 1.0


def test_remembrance_store() -> None:
    store = RemembranceStore()
    assert store.lookup("10.0.0.1") == 0.0
    assert store.get("10.0.0.1") is None
    store.checkpoint(ScoreState("10.0.0.2", 0.0, 1.0, START))
    store.checkpoint(ScoreState("10.0.0.1", 0.0, 2.0, START))
    store.checkpoint(ScoreState("10.0.0.1", 2.0, 3.0, START + 1))
    assert store.lookup("10.0.0.1") == 3.0
    assert store.identities() == ["10.0.0.1", "10.0.0.2"]
    assert len(store) == 2


def test_session_errors() -> None:
    engine = new_engine(ScoreConfig())
    with pytest.raises(SessionError):
        engine.observe(_block(1, PEER_A, "b1"))
    with pytest.raises(SessionError):
        engine.observe(_session(1, PEER_A, KIND_DISCONNECT))
    with pytest.raises(SessionError):
        engine.close_window(PEER_A, START + 1)
    engine.observe(_session(2, PEER_A, KIND_CONNECT))
    with pytest.raises(SessionError):
        engine.observe(_session(3, PEER_A, KIND_CONNECT))
    engine.close_window(PEER_A, START + 5)
    with pytest.raises(ValueError):
        engine.close_window(PEER_A, START + 4)
    with pytest.raises(TypeError):
        new_engine({"gamma": 1.0})  # type: ignore


def test_golden_three_sessions() -> None:
    events = read_events(os.path.join("tests", "test_files", "three_sessions.tsv"))
    records = score_trace(events, GOLDEN_CONFIG)
    assert _summary(records) == [
        ("10.0.0.1", 10.0, 0.0, 1.5, False),
        ("10.0.0.2", 13.0, 0.0, 2.0, False),
        ("10.0.0.1", 15.0, 1.5, 1.5, True),
        ("10.0.0.2", 23.0, 2.0, 2.5, False),
        ("10.0.0.2", 25.0, 2.5, 2.5, True),
        ("10.0.0.1", 26.0, 1.5, 2.0, True),
    ]
    # Windows are aligned to each session's CONNECT
    assert records[1].measurement.window_start == START + 3
    assert records[1].session_start == START + 3
    assert records[5].measurement.window_start == START + 20
    assert records[5].identity == "10.0.0.1"


def test_only_blocks() -> None:
    events = read_events(os.path.join("tests", "test_files", "three_sessions.tsv"))
    config = ScoreConfig(w_block=1.0, fee_scale=1000, window_seconds=10)
    labels = [record.state.s_curr for record in score_trace(events, config)]
    assert labels == [1.0, 0.0, 1.0, 1.0, 1.0, 1.0]


def test_reconnect_identity_modes() -> None:
    events = read_events(os.path.join("tests", "test_files", "reconnect_new_port.tsv"))
    by_address = score_trace(events, ScoreConfig(w_block=1.0, window_seconds=10))
    assert [(r.state.s_prev, r.state.s_curr) for r in by_address] == [(0.0, 1.0), (1.0, 2.0)]

    by_endpoint = score_trace(
        events,
        ScoreConfig(w_block=1.0, window_seconds=10, identity_mode=IDENTITY_ADDRESS_AND_PORT),
    )
    assert [(r.state.s_prev, r.state.s_curr) for r in by_endpoint] == [(0.0, 1.0), (0.0, 1.0)]
    assert by_endpoint[1].identity == "10.0.0.1:50000"


def test_prior_mode() -> None:
    events = [
        _session(0, PEER_A, KIND_CONNECT),
        _block(1, PEER_A, "b1"),
        _block(11, PEER_A, "b2"),
        _session(25, PEER_A, KIND_DISCONNECT),
    ]
    config = ScoreConfig(gamma=0.5, w_block=1.0, window_seconds=10, decay_mode=DECAY_PRIOR)
    assert [record.state.s_curr for record in score_trace(events, config)] == [1.0, 1.5, 0.75]


def test_open_sessions_closed_at_end() -> None:
    events = [
        _session(0, PEER_A, KIND_CONNECT),
        _block(5, PEER_A, "b1"),
        _session(25, PEER_B, KIND_CONNECT),
    ]
    records = score_trace(events, ScoreConfig(w_block=1.0, window_seconds=10))
    assert _summary(records) == [
        ("10.0.0.1", 10.0, 0.0, 1.0, False),
        ("10.0.0.1", 20.0, 1.0, 1.0, False),
        ("10.0.0.1", 25.0, 1.0, 1.0, True),
        ("10.0.0.2", 25.0, 0.0, 0.0, True),
    ]


def test_event_at_window_end_goes_to_next_window() -> None:
    events = [
        _session(0, PEER_A, KIND_CONNECT),
        _block(10, PEER_A, "b1"),
        _session(15, PEER_A, KIND_DISCONNECT),
    ]
    records = score_trace(events, ScoreConfig(w_block=1.0, window_seconds=10))
    assert [record.measurement.f_block for record in records] == [0, 1]


def test_unordered_trace() -> None:
    events = [_session(5, PEER_A, KIND_CONNECT), _session(4, PEER_A, KIND_DISCONNECT)]
    with pytest.raises(TraceOrderError):
        score_trace(events, ScoreConfig())


def test_empty_trace() -> None:
    assert score_trace([], ScoreConfig()) == []


def _random_trace(seed: int, window_seconds: float = 10.0) -> List[ObservationEvent]:
    """A valid trace on integer timestamps, so many events land exactly on window ends.

    Each address holds at most one session at a time and may reconnect on a new port.
    """
    rng = np.random.default_rng(seed)
    addresses = [f"10.0.1.{idx}" for idx in range(1, int(rng.integers(3, 8)))]
    connected: Dict[str, PeerKey] = {}
    last_disconnect: Dict[str, float] = {}
    events: List[ObservationEvent] = []
    ts = float(rng.integers(0, int(window_seconds)))
    for _ in range(int(rng.integers(30, 150))):
        ts += float(rng.integers(0, 4))
        address = addresses[int(rng.integers(len(addresses)))]
        peer = connected.get(address)
        if peer is None:
            if last_disconnect.get(address) == ts:
                ts += 1.0
            peer = PeerKey(address, int(rng.choice([8333, 50000, 50001])))
            connected[address] = peer
            events.append(_session(ts, peer, KIND_CONNECT))
        elif rng.random() < 0.15:
            del connected[address]
            last_disconnect[address] = ts
            events.append(_session(ts, peer, KIND_DISCONNECT))
        elif rng.random() < 0.4:
            events.append(_block(ts, peer, f"{int(rng.integers(6)):02x}"))
        else:
            tag = f"{int(rng.integers(16, 28)):02x}"
            events.append(_tx(ts, peer, tag, int(rng.integers(1, 6)) * 1000))
    return events


def _is_novel(events: List[ObservationEvent], idx: int) -> bool:
    event = events[idx]
    assert isinstance(event.payload, (BlockPayload, TxPayload))
    earlier = {
        prior.payload.hash
        for prior in events[:idx]
        if prior.kind == event.kind
        and isinstance(prior.payload, (BlockPayload, TxPayload))
    }
    return event.payload.hash not in earlier


def _oracle_windows(
    events: List[ObservationEvent], config: ScoreConfig
) -> Dict[Tuple[PeerKey, float], List[WindowSummary]]:
    """Recompute every session's windows and scores from the raw events alone.

    Windows start at the CONNECT and end every window_seconds; the last one ends at
    the DISCONNECT, or at the last timestamp of the trace for sessions left open.
    """
    width = config.window_seconds
    # (peer, index of CONNECT, index of the session's end)
    sessions: List[Tuple[PeerKey, int, int]] = []
    open_at: Dict[PeerKey, int] = {}
    for idx, event in enumerate(events):
        if event.kind == KIND_CONNECT:
            open_at[event.peer] = idx
        elif event.kind == KIND_DISCONNECT:
            sessions.append((event.peer, open_at.pop(event.peer), idx))
    sessions.extend((peer, first, len(events) - 1) for peer, first in open_at.items())
    sessions.sort(key=lambda session: session[1])

    final_scores: Dict[str, float] = {}
    expected: Dict[Tuple[PeerKey, float], List[WindowSummary]] = {}
    for peer, first, last in sessions:
        connect_ts = events[first].ts
        end_ts = events[last].ts
        full = 0
        while connect_ts + (full + 1) * width <= end_ts:
            full += 1

        blocks = [0] * (full + 1)
        fees = [0.0] * (full + 1)
        active = [False] * (full + 1)
        for idx in range(first + 1, last + 1):
            event = events[idx]
            if event.peer != peer or event.kind in (KIND_CONNECT, KIND_DISCONNECT):
                continue
            window = 0
            while window < full and connect_ts + (window + 1) * width <= event.ts:
                window += 1
            active[window] = True
            if not _is_novel(events, idx):
                continue
            if event.kind == KIND_BLOCK:
                blocks[window] += 1
            elif event.kind == KIND_TX:
                assert isinstance(event.payload, TxPayload)
                fees[window] += event.payload.fee / config.fee_scale

        trailing_start = connect_ts + full * width
        bounds = [
            (connect_ts + idx * width, connect_ts + (idx + 1) * width) for idx in range(full)
        ]
        if end_ts > trailing_start or full == 0 or active[full]:
            bounds.append((trailing_start, end_ts))

        identity = config.identity(peer)
        score = final_scores.get(identity, 0.0)
        windows: List[WindowSummary] = []
        for idx, (start, end) in enumerate(bounds):
            f_block, f_fee = blocks[idx], fees[idx]
            increment = config.w_block * f_block + (1.0 - config.w_block) * f_fee
            if config.decay_mode == DECAY_PRIOR:
                next_score = config.gamma * score + increment
            else:
                next_score = score + config.gamma * increment
            windows.append((start, end, idx >= full, f_block, f_fee, score, next_score))
            score = next_score
        final_scores[identity] = score
        expected[(peer, connect_ts)] = windows
    return expected


def _engine_windows(
    records: List[WindowRecord],
) -> Dict[Tuple[PeerKey, float], List[WindowSummary]]:
    windows: Dict[Tuple[PeerKey, float], List[WindowSummary]] = {}
    for record in records:
        measurement = record.measurement
        windows.setdefault((record.peer, record.session_start), []).append(
            (
                measurement.window_start,
                measurement.window_end,
                measurement.partial,
                measurement.f_block,
                measurement.f_fee,
                record.state.s_prev,
                record.state.s_curr,
            )
        )
    return windows


def _assert_windows_match(events: List[ObservationEvent], config: ScoreConfig) -> None:
    expected = _oracle_windows(events, config)
    actual = _engine_windows(score_trace(events, config))
    assert actual.keys() == expected.keys()
    for session, windows in expected.items():
        assert len(actual[session]) == len(windows), session
        for got, want in zip(actual[session], windows):
            assert got[:4] == want[:4], session
            assert got[4:] == pytest.approx(want[4:], rel=1e-12, abs=1e-12), session


@pytest.mark.parametrize("seed", range(500))
def test_random_trace_matches_oracle(seed: int) -> None:
    config = ScoreConfig(gamma=0.8, w_block=0.3, fee_scale=1000, window_seconds=10)
    _assert_windows_match(_random_trace(seed), config)


@pytest.mark.parametrize("seed", range(20))
def test_random_trace_matches_oracle_prior_mode(seed: int) -> None:
    config = ScoreConfig(
        gamma=0.6, w_block=0.7, fee_scale=1000, window_seconds=7, decay_mode=DECAY_PRIOR
    )
    _assert_windows_match(_random_trace(1000 + seed, window_seconds=7), config)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_simulated_trace_matches_oracle(seed: int) -> None:
    events, _ = simulate(
        DEFAULT_SCENARIO.with_overrides(
            duration_s=600.0, seed=seed, tx_rate_per_s=0.2, peer_pool_size=8
        )
    )
    config = ScoreConfig(
        gamma=0.7,
        w_block=0.5,
        fee_scale=1000,
        window_seconds=30,
        identity_mode=IDENTITY_ADDRESS_AND_PORT,
    )
    _assert_windows_match(events, config)


def test_boundary_disconnect_keeps_credit() -> None:
    events = [
        _session(0, PEER_A, KIND_CONNECT),
        _session(0, PEER_B, KIND_CONNECT),
        _block(10, PEER_A, "ab"),
        _session(10, PEER_A, KIND_DISCONNECT),
        _block(11, PEER_B, "ab"),
        _session(15, PEER_B, KIND_DISCONNECT),
    ]
    records = score_trace(events, ScoreConfig(w_block=1.0, window_seconds=10))
    assert _summary(records) == [
        ("10.0.0.1", 10.0, 0.0, 0.0, False),
        ("10.0.0.2", 10.0, 0.0, 0.0, False),
        ("10.0.0.1", 10.0, 0.0, 1.0, True),
        ("10.0.0.2", 15.0, 0.0, 0.0, True),
    ]
    assert records[2].measurement.duration == 0.0
    assert sum(record.measurement.f_block for record in records) == 1


def test_boundary_trace_end_keeps_credit() -> None:
    events = [_session(0, PEER_A, KIND_CONNECT), _block(10, PEER_A, "ab")]
    records = score_trace(events, ScoreConfig(w_block=1.0, window_seconds=10))
    assert _summary(records) == [
        ("10.0.0.1", 10.0, 0.0, 0.0, False),
        ("10.0.0.1", 10.0, 0.0, 1.0, True),
    ]


def test_boundary_without_activity_adds_no_window() -> None:
    events = [_session(0, PEER_A, KIND_CONNECT), _session(10, PEER_A, KIND_DISCONNECT)]
    records = score_trace(events, ScoreConfig(w_block=1.0, window_seconds=10))
    assert _summary(records) == [("10.0.0.1", 10.0, 0.0, 0.0, False)]


@pytest.mark.parametrize("seed", range(20))
def test_increment_mode_is_monotone(seed: int) -> None:
    config = ScoreConfig(gamma=0.8, w_block=0.4, fee_scale=1000, window_seconds=10)
    by_identity: Dict[str, List[float]] = {}
    for record in score_trace(_random_trace(seed), config):
        assert record.state.s_curr >= record.state.s_prev
        by_identity.setdefault(record.identity, []).append(record.state.s_curr)
    for scores in by_identity.values():
        assert scores == sorted(scores)


@pytest.mark.parametrize("scale", [4.0, 10.0, 1e4])
def test_fee_scale_divides_scores(scale: float) -> None:
    events = _random_trace(7)
    base = ScoreConfig(gamma=0.9, w_block=0.0, fee_scale=1.0, window_seconds=10)
    scaled = ScoreConfig(gamma=0.9, w_block=0.0, fee_scale=scale, window_seconds=10)
    base_records = score_trace(events, base)
    scaled_records = score_trace(events, scaled)
    assert len(base_records) == len(scaled_records)
    assert any(record.state.s_curr > 0 for record in base_records)
    for plain, divided in zip(base_records, scaled_records):
        assert divided.state.s_curr == pytest.approx(plain.state.s_curr / scale, rel=1e-12)
        assert divided.measurement.f_fee == pytest.approx(
            plain.measurement.f_fee / scale, rel=1e-12
        )


def _scores_by_window(records: List[WindowRecord]) -> Dict[Tuple, float]:
    return {
        (
            record.peer,
            record.session_start,
            record.measurement.window_end,
            record.measurement.partial,
        ): record.state.s_curr
        for record in records
    }


@pytest.mark.parametrize("seed", range(20))
def test_tx_only_scores_ignore_blocks(seed: int) -> None:
    events = _random_trace(seed)
    without_blocks = [event for event in events if event.kind != KIND_BLOCK]
    config = ScoreConfig(gamma=0.9, w_block=0.0, fee_scale=1000, window_seconds=10)
    with_records = score_trace(events, config)
    without_records = score_trace(without_blocks, config)
    assert _final_scores(with_records) == _final_scores(without_records)

    with_scores = _scores_by_window(with_records)
    without_scores = _scores_by_window(without_records)
    shared = with_scores.keys() & without_scores.keys()
    assert shared
    for key in shared:
        assert with_scores[key] == without_scores[key]


def _final_scores(records: List[WindowRecord]) -> Dict[str, float]:
    return {record.identity: record.state.s_curr for record in records}


def _split_sessions(events: List[ObservationEvent]) -> List[ObservationEvent]:
    """Insert a disconnect and immediate reconnect before each session's first delivery."""
    split: List[ObservationEvent] = []
    pending: Set[PeerKey] = set()
    for event in events:
        if event.kind == KIND_CONNECT:
            pending.add(event.peer)
        elif event.kind == KIND_DISCONNECT:
            pending.discard(event.peer)
        elif event.kind in (KIND_BLOCK, KIND_TX) and event.peer in pending:
            pending.discard(event.peer)
            split.append(ObservationEvent(event.ts, event.peer, KIND_DISCONNECT))
            split.append(ObservationEvent(event.ts, event.peer, KIND_CONNECT))
        split.append(event)
    return split


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_split_sessions_keep_scores(seed: int) -> None:
    events, _ = simulate(
        DEFAULT_SCENARIO.with_overrides(
            duration_s=1200.0, seed=seed, tx_rate_per_s=0.2, peer_pool_size=8
        )
    )
    split = _split_sessions(events)
    assert len(split) > len(events)
    config = ScoreConfig(gamma=0.9, w_block=0.25, fee_scale=1000, window_seconds=30)
    expected = _final_scores(score_trace(events, config))
    actual = _final_scores(score_trace(split, config))
    assert actual.keys() == expected.keys()
    for identity, score in expected.items():
        assert actual[identity] == pytest.approx(score, rel=1e-12, abs=1e-12)
