import math
import os
from typing import Dict, List, Set

import numpy as np
import pytest

from peerscore.model import (
    KIND_BLOCK,
    KIND_CONNECT,
    KIND_DISCONNECT,
    KIND_TX,
    BlockPayload,
    ObservationEvent,
    TxPayload,
)
from peerscore.scoring import ScoreConfig, score_trace
from peerscore.simulator import (
    DEFAULT_SCENARIO,
    GroundTruth,
    Scenario,
    ScenarioError,
    arrival_times,
    expected_scores,
    load_scenario,
    session_counts,
    simulate,
)
from peerscore.trace import format_event
from peerscore.validation import validate_trace

SMALL = DEFAULT_SCENARIO.with_overrides(
    duration_s=1800.0, tx_rate_per_s=0.5, peer_pool_size=12
)


def _single_peer(**overrides: float) -> Scenario:
    return DEFAULT_SCENARIO.with_overrides(
        peer_pool_size=1,
        max_concurrent_peers=1,
        peer_quality=[1.0],
        short_lived_fraction=0.0,
        session_median_s=1e9,
        session_sigma=0.0,
        **overrides,
    )


def _tx_hashes(events: List[ObservationEvent]) -> Set[str]:
    return {
        event.payload.hash for event in events if isinstance(event.payload, TxPayload)
    }


def test_deterministic() -> None:
    first, truth = simulate(SMALL)
    second, _ = simulate(SMALL)
    assert [format_event(event) for event in first] == [format_event(event) for event in second]
    other, _ = simulate(SMALL.with_overrides(seed=SMALL.seed + 1))
    assert first != other
    assert truth.tx_count > 0


def test_trace_is_valid() -> None:
    events, truth = simulate(SMALL.with_overrides(inbound_fraction=0.5))
    report = validate_trace(events)
    assert report.is_valid()
    assert report.session_count == len(truth.sessions)


def test_concurrency_limit() -> None:
    events, _ = simulate(SMALL.with_overrides(peer_arrival_rate=1.0, session_median_s=60.0))
    counts = session_counts(events)
    assert max(count for _, count in counts) <= SMALL.max_concurrent_peers
    assert counts[-1][1] == 0


def test_first_deliveries() -> None:
    events, truth = simulate(SMALL)
    first_seen: Dict[str, str] = {}
    for event in events:
        if isinstance(event.payload, (BlockPayload, TxPayload)):
            first_seen.setdefault(event.payload.hash, event.peer.address)
    assert set(first_seen) == set(truth.first_deliverers)
    for item_hash, peer in truth.first_deliverers.items():
        assert first_seen[item_hash] == peer.address
    assert sum(truth.quality.values()) == pytest.approx(1.0)


def test_redundant_deliveries() -> None:
    events, truth = simulate(SMALL.with_overrides(echo_probability=1.0))
    deliveries = sum(1 for event in events if event.kind in (KIND_BLOCK, KIND_TX))
    assert deliveries > len(truth.first_deliverers)


def test_zero_duration() -> None:
    events, truth = simulate(DEFAULT_SCENARIO.with_overrides(duration_s=0.0))
    assert events
    assert {event.kind for event in events} == {KIND_CONNECT, KIND_DISCONNECT}
    assert not truth.first_deliverers
    assert validate_trace(events).is_valid()


def test_single_peer_delivers_everything() -> None:
    events, truth = simulate(_single_peer(duration_s=3600.0, tx_rate_per_s=0.2))
    (address,) = truth.quality
    assert truth.quality[address] == 1.0
    assert truth.first_deliverers
    assert all(peer.address == address for peer in truth.first_deliverers.values())
    assert len(truth.sessions) == 1


def test_block_interval_calibration() -> None:
    rng = np.random.default_rng(42)
    times = arrival_times(rng, 1.0 / 600.0, 0.0, 600.0 * 5000)
    assert np.all(np.diff(times) > 0)
    assert 510.0 <= np.diff(times).mean() <= 690.0
    assert len(arrival_times(rng, 1.0, 5.0, 5.0)) == 0


def test_tx_rate_calibration() -> None:
    scenario = DEFAULT_SCENARIO.with_overrides(duration_s=1800.0)
    events, truth = simulate(scenario)
    tx_hashes = _tx_hashes(events)
    assert 3.0 <= len(tx_hashes) / scenario.duration_s <= 7.0
    assert len(tx_hashes) <= truth.tx_count


@pytest.mark.slow
def test_default_calibration() -> None:
    events, truth = simulate(DEFAULT_SCENARIO)
    tx_hashes = _tx_hashes(events)
    assert 3.0 <= len(tx_hashes) / DEFAULT_SCENARIO.duration_s <= 7.0
    assert max(count for _, count in session_counts(events)) <= 10
    assert truth.block_times
    # Mean block gap on the default seed
    assert 510.0 <= float(np.diff(truth.block_times).mean()) <= 690.0


def test_churn() -> None:
    scenario = DEFAULT_SCENARIO.with_overrides(
        duration_s=86400.0,
        peer_arrival_rate=0.5,
        session_median_s=120.0,
        tx_rate_per_s=0.01,
        msg_rate_per_s=0.01,
        addr_rate_per_s=0.001,
        seed=5,
    )
    _, truth = simulate(scenario)
    sessions = [session for session in truth.sessions if not session.truncated]
    short = sum(1 for session in sessions if session.duration < 1.0)
    assert len(sessions) > 1000
    fraction = short / len(sessions)
    assert abs(fraction - scenario.short_lived_fraction) <= 0.2 * scenario.short_lived_fraction

    median_quality = float(np.median(list(truth.quality.values())))
    high: List[float] = []
    low: List[float] = []
    for session in sessions:
        if session.short_lived:
            continue
        quality = truth.quality_of(session.peer.address)
        (high if quality > median_quality else low).append(session.duration)
    assert np.median(high) > np.median(low)

    # Peers come back with the same address
    addresses = [session.peer.address for session in truth.sessions]
    assert len(set(addresses)) < len(addresses)


def test_expected_scores() -> None:
    scenario = DEFAULT_SCENARIO.with_overrides(duration_s=600.0)
    config = ScoreConfig(w_block=1.0, window_seconds=60)
    truth = GroundTruth({"10.0.0.1": 0.5, "10.0.0.2": 0.5}, {}, [], [], 0)
    trajectories = expected_scores(truth, scenario, config)
    assert trajectories["10.0.0.1"][0] == pytest.approx(0.05)
    assert trajectories["10.0.0.1"][-1] == pytest.approx(0.5)
    assert len(trajectories["10.0.0.1"]) == 10

    zero = GroundTruth({"10.0.0.1": 0.0}, {}, [], [], 0)
    assert np.all(expected_scores(zero, scenario, config)["10.0.0.1"] == 0.0)

    with pytest.raises(ValueError):
        expected_scores(truth, scenario, ScoreConfig(decay_mode="prior"))


def test_expected_scores_match_simulation() -> None:
    config = ScoreConfig(w_block=1.0, window_seconds=600)
    finals = []
    for seed in range(30):
        scenario = _single_peer(
            duration_s=6000.0, block_interval_s=60.0, tx_rate_per_s=0.001, seed=seed
        )
        events, truth = simulate(scenario)
        records = score_trace(events, config)
        finals.append(records[-1].state.s_curr)

    (trajectory,) = expected_scores(truth, scenario, config).values()
    expected = trajectory[-1]

    assert expected == pytest.approx(100.0)
    standard_error = np.std(finals, ddof=1) / math.sqrt(len(finals))
    assert abs(np.mean(finals) - expected) <= 3 * standard_error


def test_scenario_validation() -> None:
    with pytest.raises(ScenarioError) as err:
        Scenario(block_interval_s=-5)
    assert err.value.field == "block_interval_s"
    assert "block_interval_s" in str(err.value)

    with pytest.raises(ScenarioError) as err:
        Scenario(max_concurrent_peers=1.5)  # type: ignore
    assert err.value.field == "max_concurrent_peers"

    with pytest.raises(ScenarioError) as err:
        Scenario(short_lived_fraction=1.5)
    assert err.value.field == "short_lived_fraction"

    with pytest.raises(ScenarioError) as err:
        Scenario(peer_pool_size=3, peer_quality=[1.0, 2.0])
    assert err.value.field == "peer_quality"

    with pytest.raises(ScenarioError) as err:
        DEFAULT_SCENARIO.with_overrides(blocks_per_hour=6)
    assert err.value.field == "blocks_per_hour"


def test_load_scenario() -> None:
    scenario = load_scenario(os.path.join("tests", "test_files", "small_scenario.json"))
    assert scenario.duration_s == 1800
    assert scenario.peer_pool_size == 12
    assert scenario.tx_rate_per_s == 0.5
    assert scenario.seed == 7
    assert scenario.block_interval_s == DEFAULT_SCENARIO.block_interval_s


def test_load_bad_scenario() -> None:
    with pytest.raises(ScenarioError) as err:
        load_scenario(os.path.join("tests", "test_files", "bad_scenario_value.json"))
    assert err.value.field == "block_interval_s"

    with pytest.raises(ScenarioError) as err:
        load_scenario(os.path.join("tests", "test_files", "bad_scenario_key.json"))
    assert err.value.field == "blocks_per_hour"

    with pytest.raises(ValueError):
        load_scenario(os.path.join("tests", "test_files", "three_sessions.tsv"))
    with pytest.raises(ValueError):
        load_scenario(os.path.join("tests", "test_files", "missing.json"))
