import pytest

from peerscore.model import (
    DIRECTION_INBOUND,
    DIRECTION_OUTBOUND,
    FAMILY_IPV4,
    FAMILY_IPV6,
    FAMILY_ONION,
    FAMILY_OTHER,
    KIND_BLOCK,
    KIND_CONNECT,
    KIND_DISCONNECT,
    KIND_MSG,
    KIND_TX,
    BlockPayload,
    DisconnectPayload,
    MsgPayload,
    ObservationEvent,
    PeerKey,
    RttPayload,
    TxPayload,
    address_family,
)

HASH_A = "ab" * 32


def test_peer_key() -> None:
    peer = PeerKey("10.0.0.1", 8333)
    assert peer.direction == DIRECTION_OUTBOUND
    assert peer.endpoint() == "10.0.0.1:8333"
    assert str(peer) == "10.0.0.1:8333/outbound"

    ipv6 = PeerKey("2001:db8::1", 8333, DIRECTION_INBOUND)
    assert ipv6.endpoint() == "[2001:db8::1]:8333"

    with pytest.raises(ValueError):
        PeerKey("", 8333)

    with pytest.raises(ValueError):
        PeerKey("10.0.0.1", 65536)

    with pytest.raises(ValueError):
        PeerKey("10.0.0.1", 8333, "sideways")


def test_peer_key_from_endpoint() -> None:
    assert PeerKey.from_endpoint("10.0.0.1:8333", DIRECTION_OUTBOUND) == PeerKey(
        "10.0.0.1", 8333
    )
    assert PeerKey.from_endpoint("[2001:db8::1]:18333", DIRECTION_INBOUND) == PeerKey(
        "2001:db8::1", 18333, DIRECTION_INBOUND
    )

    with pytest.raises(ValueError):
        PeerKey.from_endpoint("10.0.0.1", DIRECTION_OUTBOUND)

    with pytest.raises(ValueError):
        PeerKey.from_endpoint("10.0.0.1:port", DIRECTION_OUTBOUND)


def test_address_family() -> None:
    assert address_family("10.0.0.1") == FAMILY_IPV4
    assert address_family("2001:db8::1") == FAMILY_IPV6
    assert address_family("abcdefghijklmnop.onion") == FAMILY_ONION
    assert address_family("seed.example.com") == FAMILY_OTHER


def test_payloads() -> None:
    block = BlockPayload(HASH_A.upper(), 800000)
    # Hashes are normalized to lowercase
    assert block.hash == HASH_A
    assert BlockPayload.from_fields(dict(block.to_fields())) == block

    with pytest.raises(ValueError):
        BlockPayload("abc", 1)

    tx = TxPayload(HASH_A, 1500, 250)
    assert tx.to_fields() == [("hash", HASH_A), ("fee", "1500"), ("size", "250")]
    unknown = TxPayload(HASH_A, 0, 1, fee_unknown=True)
    assert ("fee_unknown", "1") in unknown.to_fields()
    assert TxPayload.from_fields(dict(unknown.to_fields())) == unknown

    with pytest.raises(ValueError):
        TxPayload(HASH_A, -1, 250)

    with pytest.raises(ValueError):
        TxPayload(HASH_A, 1, 0)

    with pytest.raises(ValueError):
        RttPayload(-0.5)

    with pytest.raises(ValueError):
        MsgPayload("thirteenchars")

    with pytest.raises(ValueError):
        MsgPayload("get data")

    with pytest.raises(ValueError):
        DisconnectPayload("two words")


def test_observation_event() -> None:
    peer = PeerKey("10.0.0.1", 8333)
    event = ObservationEvent(1700000000.1234567, peer, KIND_CONNECT)
    # Microsecond precision
    assert event.ts == 1700000000.123457
    assert event.is_session_boundary()

    disconnect = ObservationEvent(1700000001.0, peer, KIND_DISCONNECT)
    assert disconnect.payload == DisconnectPayload()

    msg = ObservationEvent(1700000001.0, peer, KIND_MSG, MsgPayload("getaddr"))
    assert not msg.is_session_boundary()

    with pytest.raises(ValueError):
        ObservationEvent(1700000000.0, peer, "TELEPORT")

    with pytest.raises(ValueError):
        # CONNECT carries no payload
        ObservationEvent(1700000000.0, peer, KIND_CONNECT, RttPayload(1.0))

    with pytest.raises(ValueError):
        # Wrong payload type for the kind
        ObservationEvent(1700000000.0, peer, KIND_TX, BlockPayload(HASH_A, 1))

    with pytest.raises(ValueError):
        ObservationEvent(1700000000.0, peer, KIND_BLOCK)
