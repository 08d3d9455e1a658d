import hashlib
import struct
from io import BytesIO
from typing import List, Optional, Tuple

from attr import attrib, attrs

MAINNET_MAGIC = bytes.fromhex("f9beb4d9")
HEADER_SIZE = 24
COMMAND_SIZE = 12
CHECKSUM_SIZE = 4
# Bitcoin Core's limit on a single protocol message
MAX_PAYLOAD_SIZE = 32 * 1024 * 1024

PROTOCOL_VERSION = 70016
SERVICES_NONE = 0

COMMAND_VERSION = "version"
COMMAND_VERACK = "verack"
COMMAND_PING = "ping"
COMMAND_PONG = "pong"
COMMAND_INV = "inv"
COMMAND_ADDR = "addr"
COMMAND_ADDRV2 = "addrv2"
COMMAND_HEADERS = "headers"
COMMAND_FEEFILTER = "feefilter"

INV_TX = 1
INV_BLOCK = 2
INV_WITNESS_TX = 0x40000001
INV_WITNESS_BLOCK = 0x40000002
TX_INV_TYPES = (INV_TX, INV_WITNESS_TX)
BLOCK_INV_TYPES = (INV_BLOCK, INV_WITNESS_BLOCK)

DECODE_OK = "ok"
DECODE_NEED_MORE = "need_more"
DECODE_CORRUPT = "corrupt"


class WireFormatError(ValueError):
    pass


def double_sha256(data: bytes) -> bytes:
    return hashlib.sha256(hashlib.sha256(data).digest()).digest()


def checksum(payload: bytes) -> bytes:
    return double_sha256(payload)[:CHECKSUM_SIZE]


def _encode_command(command: str) -> bytes:
    if not command or not command.isascii() or "\x00" in command:
        raise WireFormatError(f"Command must be non-empty ASCII: {repr(command)}")
    encoded = command.encode("ascii")
    if len(encoded) > COMMAND_SIZE:
        raise WireFormatError(
            f"Command {repr(command)} is {len(encoded)} characters; the limit is {COMMAND_SIZE}"
        )
    return encoded.ljust(COMMAND_SIZE, b"\x00")


@attrs(frozen=True, slots=True)
class WireMessage:
    command: str = attrib()
    payload: bytes = attrib()
    magic: bytes = attrib(default=MAINNET_MAGIC)

    @property
    def length(self) -> int:
        return len(self.payload)

    @property
    def checksum(self) -> bytes:
        return checksum(self.payload)


@attrs(frozen=True, slots=True)
class DecodeResult:
    status: str = attrib()
    # Number of bytes the caller should drop from the front of its buffer
    consumed: int = attrib(default=0)
    message: Optional[WireMessage] = attrib(default=None)
    reason: Optional[str] = attrib(default=None)


def encode_message(command: str, payload: bytes, magic: bytes = MAINNET_MAGIC) -> bytes:
    """Frame a payload with the 24-byte message header."""
    if len(payload) > MAX_PAYLOAD_SIZE:
        raise WireFormatError(f"Payload of {len(payload)} bytes exceeds {MAX_PAYLOAD_SIZE}")
    return b"".join(
        [
            magic,
            _encode_command(command),
            struct.pack("<I", len(payload)),
            checksum(payload),
            payload,
        ]
    )


def _corrupt(consumed: int, reason: str) -> DecodeResult:
    return DecodeResult(DECODE_CORRUPT, consumed, reason=reason)


def decode_message(buffer: bytes, magic: bytes = MAINNET_MAGIC) -> DecodeResult:
    """Try to decode one message from the front of buffer.

    A corrupt result tells the caller how many bytes to skip; the next attempt then
    starts at the next occurrence of the magic constant.
    """
    start = buffer.find(magic)
    if start == -1:
        # Keep a tail that could be the start of a split magic constant
        skip = max(0, len(buffer) - (len(magic) - 1))
        if skip:
            return _corrupt(skip, f"No magic constant in {len(buffer)} bytes")
        return DecodeResult(DECODE_NEED_MORE)
    if start > 0:
        return _corrupt(start, f"Skipped {start} bytes before the magic constant")

    if len(buffer) < HEADER_SIZE:
        return DecodeResult(DECODE_NEED_MORE)

    raw_command = buffer[4 : 4 + COMMAND_SIZE]
    command_bytes = raw_command.rstrip(b"\x00")
    if not command_bytes or b"\x00" in command_bytes or not command_bytes.isascii():
        return _corrupt(1, f"Invalid command field {raw_command!r}")
    (length,) = struct.unpack("<I", buffer[16:20])
    if length > MAX_PAYLOAD_SIZE:
        return _corrupt(1, f"Declared payload length {length} exceeds {MAX_PAYLOAD_SIZE}")
    if len(buffer) < HEADER_SIZE + length:
        return DecodeResult(DECODE_NEED_MORE)

    payload = bytes(buffer[HEADER_SIZE : HEADER_SIZE + length])
    if buffer[20:24] != checksum(payload):
        return _corrupt(1, f"Checksum mismatch for {command_bytes.decode('ascii')} message")

    message = WireMessage(command_bytes.decode("ascii"), payload, magic)
    return DecodeResult(DECODE_OK, HEADER_SIZE + length, message)


class MessageStream:
    """Incremental decoder over a byte stream that resyncs after corrupt frames."""

    def __init__(self, magic: bytes = MAINNET_MAGIC) -> None:
        self.magic = magic
        self.corrupt_frames = 0
        self._buffer = bytearray()

    def feed(self, data: bytes) -> List[WireMessage]:
        self._buffer.extend(data)
        messages = []
        while True:
            result = decode_message(bytes(self._buffer), self.magic)
            if result.status == DECODE_NEED_MORE:
                break
            del self._buffer[: result.consumed]
            if result.status == DECODE_OK:
                assert result.message is not None
                messages.append(result.message)
            else:
                self.corrupt_frames += 1
        return messages

    @property
    def pending(self) -> int:
        return len(self._buffer)


def write_varint(value: int) -> bytes:
    if value < 0xFD:
        return struct.pack("<B", value)
    elif value <= 0xFFFF:
        return b"\xfd" + struct.pack("<H", value)
    elif value <= 0xFFFFFFFF:
        return b"\xfe" + struct.pack("<I", value)
    else:
        return b"\xff" + struct.pack("<Q", value)


def read_varint(data: BytesIO) -> int:
    prefix = data.read(1)
    if not prefix:
        raise WireFormatError("Truncated variable-length integer")
    first = prefix[0]
    if first < 0xFD:
        return first
    size, fmt = {0xFD: (2, "<H"), 0xFE: (4, "<I"), 0xFF: (8, "<Q")}[first]
    raw = data.read(size)
    if len(raw) != size:
        raise WireFormatError("Truncated variable-length integer")
    return int(struct.unpack(fmt, raw)[0])


def _network_address(port: int) -> bytes:
    # Services, IPv4-mapped unspecified address, port
    return struct.pack("<Q", SERVICES_NONE) + bytes(10) + b"\xff\xff" + bytes(4) + struct.pack(
        ">H", port
    )


def version_payload(
    nonce: int,
    timestamp: int,
    user_agent: str,
    *,
    start_height: int = 0,
    port: int = 8333,
    protocol_version: int = PROTOCOL_VERSION,
) -> bytes:
    """Build a version payload that advertises no services and asks for no relay."""
    agent = user_agent.encode("ascii")
    return b"".join(
        [
            struct.pack("<i", protocol_version),
            struct.pack("<Q", SERVICES_NONE),
            struct.pack("<q", timestamp),
            _network_address(port),
            _network_address(0),
            struct.pack("<Q", nonce),
            write_varint(len(agent)),
            agent,
            struct.pack("<i", start_height),
            struct.pack("<?", False),
        ]
    )


def parse_version_start_height(payload: bytes) -> int:
    """Return the start height a peer reports in its version message."""
    data = BytesIO(payload)
    # Version, services, timestamp, two network addresses, nonce
    data.seek(4 + 8 + 8 + 26 + 26 + 8)
    agent_length = read_varint(data)
    data.seek(agent_length, 1)
    raw = data.read(4)
    if len(raw) != 4:
        raise WireFormatError("Version payload is too short to contain a start height")
    return int(struct.unpack("<i", raw)[0])


def nonce_payload(nonce: int) -> bytes:
    return struct.pack("<Q", nonce)


def parse_nonce(payload: bytes) -> int:
    if len(payload) < 8:
        raise WireFormatError(f"Nonce payload has {len(payload)} bytes, expected 8")
    return int(struct.unpack("<Q", payload[:8])[0])


def inv_payload(items: List[Tuple[int, str]]) -> bytes:
    parts = [write_varint(len(items))]
    for inv_type, inv_hash in items:
        # Hashes are displayed in reverse byte order
        parts.append(struct.pack("<I", inv_type) + bytes.fromhex(inv_hash)[::-1])
    return b"".join(parts)


def parse_inv(payload: bytes) -> List[Tuple[int, str]]:
    data = BytesIO(payload)
    count = read_varint(data)
    items = []
    for _ in range(count):
        raw = data.read(36)
        if len(raw) != 36:
            raise WireFormatError(f"Inventory payload ends before item {len(items) + 1}")
        (inv_type,) = struct.unpack("<I", raw[:4])
        items.append((int(inv_type), raw[4:][::-1].hex()))
    return items


def parse_count(payload: bytes) -> int:
    """Return the leading item count of an addr, addrv2 or headers payload."""
    return read_varint(BytesIO(payload))


def parse_feefilter(payload: bytes) -> float:
    """Return the fee rate in satoshi per byte; the wire value is per kilobyte."""
    if len(payload) < 8:
        raise WireFormatError(f"Feefilter payload has {len(payload)} bytes, expected 8")
    (per_kb,) = struct.unpack("<q", payload[:8])
    return max(0, per_kb) / 1000.0
