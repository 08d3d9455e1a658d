import re
from typing import Any, Dict, List, Mapping, Optional, Tuple, Type, Union

from attr import Attribute, attrib, attrs

from peerscore.util import format_float, validator_nonempty_str, validator_nonnegative

DIRECTION_INBOUND = "inbound"
DIRECTION_OUTBOUND = "outbound"
SUPPORTED_DIRECTIONS = (DIRECTION_INBOUND, DIRECTION_OUTBOUND)

KIND_CONNECT = "CONNECT"
KIND_DISCONNECT = "DISCONNECT"
KIND_BLOCK = "BLOCK"
KIND_TX = "TX"
KIND_PING_RTT = "PING_RTT"
KIND_PROTO_PING_RTT = "PROTO_PING_RTT"
KIND_ADDR = "ADDR"
KIND_HEADERS_HEIGHT = "HEADERS_HEIGHT"
KIND_BLOCK_HEIGHT = "BLOCK_HEIGHT"
KIND_FEEFILTER = "FEEFILTER"
KIND_MSG = "MSG"
SESSION_KINDS = (KIND_CONNECT, KIND_DISCONNECT)
ACTIVITY_KINDS = (
    KIND_BLOCK,
    KIND_TX,
    KIND_PING_RTT,
    KIND_PROTO_PING_RTT,
    KIND_ADDR,
    KIND_HEADERS_HEIGHT,
    KIND_BLOCK_HEIGHT,
    KIND_FEEFILTER,
    KIND_MSG,
)
SUPPORTED_EVENT_KINDS = SESSION_KINDS + ACTIVITY_KINDS

FAMILY_IPV4 = "ipv4"
FAMILY_IPV6 = "ipv6"
FAMILY_ONION = "onion"
FAMILY_OTHER = "other"

MAX_COMMAND_LEN = 12
TIMESTAMP_DECIMALS = 6

_HASH_RE = re.compile(r"^[0-9a-f]{64}$")
_IPV4_RE = re.compile(r"^\d{1,3}(\.\d{1,3}){3}$")


def _validator_port(_inst: Any, _attr: Attribute, value: Any) -> None:
    if not 0 <= value <= 65535:
        raise ValueError(f"Port out of range: {repr(value)}")


def _validator_direction(_inst: Any, _attr: Attribute, value: Any) -> None:
    if value not in SUPPORTED_DIRECTIONS:
        raise ValueError(f"Unknown direction: {repr(value)}")


def _validator_hash(_inst: Any, _attr: Attribute, value: Any) -> None:
    if not isinstance(value, str) or not _HASH_RE.match(value):
        raise ValueError(f"Hash must be 64 lowercase hex characters: {repr(value)}")


def _validator_command(_inst: Any, _attr: Attribute, value: Any) -> None:
    validator_nonempty_str(_inst, _attr, value)
    if len(value) > MAX_COMMAND_LEN or not value.isascii() or any(c.isspace() for c in value):
        raise ValueError(
            f"Command must be at most {MAX_COMMAND_LEN} ASCII characters "
            f"without whitespace: {repr(value)}"
        )


def _lower(value: str) -> str:
    return value.lower()


def _round_ts(value: float) -> float:
    return round(float(value), TIMESTAMP_DECIMALS)


def address_family(address: str) -> str:
    if address.endswith(".onion"):
        return FAMILY_ONION
    elif ":" in address:
        return FAMILY_IPV6
    elif _IPV4_RE.match(address):
        return FAMILY_IPV4
    else:
        return FAMILY_OTHER


@attrs(frozen=True, slots=True)
class PeerKey:
    address: str = attrib(validator=validator_nonempty_str)
    port: int = attrib(validator=_validator_port)
    direction: str = attrib(default=DIRECTION_OUTBOUND, validator=_validator_direction)

    def endpoint(self) -> str:
        """Return host:port, bracketing IPv6 hosts."""
        if ":" in self.address:
            return f"[{self.address}]:{self.port}"
        return f"{self.address}:{self.port}"

    def __str__(self) -> str:
        return f"{self.endpoint()}/{self.direction}"

    @classmethod
    def from_endpoint(cls, endpoint: str, direction: str) -> "PeerKey":
        if endpoint.startswith("["):
            host, sep, port = endpoint[1:].partition("]:")
        else:
            host, sep, port = endpoint.rpartition(":")
        if not sep or not port.isdigit():
            raise ValueError(f"Peer endpoint must be host:port: {repr(endpoint)}")
        return cls(host, int(port), direction)


@attrs(frozen=True, slots=True)
class BlockPayload:
    hash: str = attrib(converter=_lower, validator=_validator_hash)
    height: int = attrib()

    def to_fields(self) -> List[Tuple[str, str]]:
        return [("hash", self.hash), ("height", str(self.height))]

    @classmethod
    def from_fields(cls, fields: Mapping[str, str]) -> "BlockPayload":
        return cls(fields["hash"], int(fields["height"]))


@attrs(frozen=True, slots=True)
class TxPayload:
    hash: str = attrib(converter=_lower, validator=_validator_hash)
    fee: int = attrib(validator=validator_nonnegative)
    size: int = attrib()
    # Live collection cannot see fees, so they are recorded as 0 and flagged
    fee_unknown: bool = attrib(default=False)

    def __attrs_post_init__(self) -> None:
        if not self.size > 0:
            raise ValueError(f"Transaction size must be positive: {repr(self.size)}")

    def to_fields(self) -> List[Tuple[str, str]]:
        fields = [("hash", self.hash), ("fee", str(self.fee)), ("size", str(self.size))]
        if self.fee_unknown:
            fields.append(("fee_unknown", "1"))
        return fields

    @classmethod
    def from_fields(cls, fields: Mapping[str, str]) -> "TxPayload":
        return cls(
            fields["hash"],
            int(fields["fee"]),
            int(fields["size"]),
            fee_unknown=fields.get("fee_unknown", "0") == "1",
        )


@attrs(frozen=True, slots=True)
class RttPayload:
    rtt_ms: float = attrib(converter=float, validator=validator_nonnegative)

    def to_fields(self) -> List[Tuple[str, str]]:
        return [("rtt_ms", format_float(self.rtt_ms))]

    @classmethod
    def from_fields(cls, fields: Mapping[str, str]) -> "RttPayload":
        return cls(float(fields["rtt_ms"]))


@attrs(frozen=True, slots=True)
class AddrPayload:
    count: int = attrib(validator=validator_nonnegative)

    def to_fields(self) -> List[Tuple[str, str]]:
        return [("count", str(self.count))]

    @classmethod
    def from_fields(cls, fields: Mapping[str, str]) -> "AddrPayload":
        return cls(int(fields["count"]))


@attrs(frozen=True, slots=True)
class HeightPayload:
    height: int = attrib(validator=validator_nonnegative)

    def to_fields(self) -> List[Tuple[str, str]]:
        return [("height", str(self.height))]

    @classmethod
    def from_fields(cls, fields: Mapping[str, str]) -> "HeightPayload":
        return cls(int(fields["height"]))


@attrs(frozen=True, slots=True)
class FeeFilterPayload:
    # Satoshi per byte
    min_fee_rate: float = attrib(converter=float, validator=validator_nonnegative)

    def to_fields(self) -> List[Tuple[str, str]]:
        return [("min_fee_rate", format_float(self.min_fee_rate))]

    @classmethod
    def from_fields(cls, fields: Mapping[str, str]) -> "FeeFilterPayload":
        return cls(float(fields["min_fee_rate"]))


@attrs(frozen=True, slots=True)
class MsgPayload:
    command: str = attrib(validator=_validator_command)

    def to_fields(self) -> List[Tuple[str, str]]:
        return [("command", self.command)]

    @classmethod
    def from_fields(cls, fields: Mapping[str, str]) -> "MsgPayload":
        return cls(fields["command"])


@attrs(frozen=True, slots=True)
class DisconnectPayload:
    reason: Optional[str] = attrib(default=None)

    def __attrs_post_init__(self) -> None:
        if self.reason is not None and (not self.reason or any(c.isspace() for c in self.reason)):
            raise ValueError(f"Disconnect reason must be a single token: {repr(self.reason)}")

    def to_fields(self) -> List[Tuple[str, str]]:
        return [("reason", self.reason)] if self.reason else []

    @classmethod
    def from_fields(cls, fields: Mapping[str, str]) -> "DisconnectPayload":
        return cls(fields.get("reason"))


Payload = Union[
    BlockPayload,
    TxPayload,
    RttPayload,
    AddrPayload,
    HeightPayload,
    FeeFilterPayload,
    MsgPayload,
    DisconnectPayload,
]

PAYLOAD_TYPES: Dict[str, Optional[Type]] = {
    KIND_CONNECT: None,
    KIND_DISCONNECT: DisconnectPayload,
    KIND_BLOCK: BlockPayload,
    KIND_TX: TxPayload,
    KIND_PING_RTT: RttPayload,
    KIND_PROTO_PING_RTT: RttPayload,
    KIND_ADDR: AddrPayload,
    KIND_HEADERS_HEIGHT: HeightPayload,
    KIND_BLOCK_HEIGHT: HeightPayload,
    KIND_FEEFILTER: FeeFilterPayload,
    KIND_MSG: MsgPayload,
}


@attrs(frozen=True, slots=True)
class ObservationEvent:
    ts: float = attrib(converter=_round_ts)
    peer: PeerKey = attrib()
    kind: str = attrib()
    payload: Optional[Payload] = attrib(default=None)

    def __attrs_post_init__(self) -> None:
        if self.kind not in PAYLOAD_TYPES:
            raise ValueError(f"Unknown event kind: {repr(self.kind)}")
        if self.kind == KIND_DISCONNECT and self.payload is None:
            # Frozen, so set the default the slow way
            object.__setattr__(self, "payload", DisconnectPayload())

        expected = PAYLOAD_TYPES[self.kind]
        if expected is None:
            if self.payload is not None:
                raise ValueError(f"Event kind {self.kind} does not take a payload")
        elif not isinstance(self.payload, expected):
            raise ValueError(
                f"Event kind {self.kind} requires a {expected.__name__} payload, "
                f"got {type(self.payload).__name__}"
            )

    def is_session_boundary(self) -> bool:
        return self.kind in SESSION_KINDS


class TraceOrderError(ValueError):
    pass
