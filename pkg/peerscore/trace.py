import csv
import logging
import math
import re
from pathlib import Path
from typing import IO, Any, Dict, Iterable, List, Optional, Sequence, Set, TextIO, Tuple

from attr import attrib, attrs

from peerscore.features import (
    LABEL_COLUMN,
    REMEMBRANCE_COLUMN,
    Dataset,
    MeasurementSample,
    SchemaMismatchError,
)
from peerscore.model import (
    PAYLOAD_TYPES,
    TIMESTAMP_DECIMALS,
    ObservationEvent,
    PeerKey,
    TraceOrderError,
)
from peerscore.util import PathType, format_float

try:
    import fcntl
except ImportError:  # pragma: no cover
    # No advisory locking on this platform
    fcntl = None  # type: ignore

logger = logging.getLogger(__name__)

TRACE_ENCODING = "utf8"
FIELD_DELIM = "\t"
KEY_VALUE_DELIM = "="
COMMENT_PREFIX = "#"

FIELD_TS = "ts"
FIELD_PEER = "peer"
FIELD_DIRECTION = "dir"
FIELD_KIND = "kind"
REQUIRED_FIELDS = (FIELD_TS, FIELD_PEER, FIELD_DIRECTION, FIELD_KIND)

CSV_LINE_TERMINATOR = "\r\n"
COLUMN_WINDOW_START = "window_start"
COLUMN_WINDOW_END = "window_end"
COLUMN_PARTIAL = "partial"
COLUMN_PEER = "peer"

_UNSAFE_FILENAME_CHARS = re.compile(r"[^A-Za-z0-9.\-]+")


class TraceFormatError(ValueError):
    def __init__(self, msg: str, line_num: int, source_name: str) -> None:
        super().__init__(msg)
        self.line_num: int = line_num
        self.source_name: str = source_name


class UnknownEventKindError(TraceFormatError):
    pass


@attrs(frozen=True, slots=True)
class SkippedLine:
    line_num: int = attrib()
    reason: str = attrib()


@attrs(frozen=True)
class TraceReadResult:
    events: Tuple[ObservationEvent, ...] = attrib(converter=tuple)
    line_nums: Tuple[int, ...] = attrib(converter=tuple)
    skipped: Tuple[SkippedLine, ...] = attrib(converter=tuple)

    @property
    def warning_count(self) -> int:
        return len(self.skipped)

    def __len__(self) -> int:
        return len(self.events)


def format_event(event: ObservationEvent) -> str:
    """Format an event as one trace line, without the line terminator."""
    fields: List[Tuple[str, str]] = [
        (FIELD_TS, f"{event.ts:.{TIMESTAMP_DECIMALS}f}"),
        (FIELD_PEER, event.peer.endpoint()),
        (FIELD_DIRECTION, event.peer.direction),
        (FIELD_KIND, event.kind),
    ]
    if event.payload is not None:
        fields.extend(event.payload.to_fields())
    return FIELD_DELIM.join(f"{key}{KEY_VALUE_DELIM}{value}" for key, value in fields)


def parse_event(line: str, line_num: int, source_name: str) -> ObservationEvent:
    """Parse one trace line, which must already be stripped of its line terminator."""
    fields: Dict[str, str] = {}
    for item in line.split(FIELD_DELIM):
        key, sep, value = item.partition(KEY_VALUE_DELIM)
        if not sep or not key:
            raise TraceFormatError(
                f"Line {line_num} of {source_name} contains a field that is not "
                f"key=value: {repr(item)}",
                line_num,
                source_name,
            )
        if key in fields:
            raise TraceFormatError(
                f"Line {line_num} of {source_name} repeats the field {repr(key)}",
                line_num,
                source_name,
            )
        fields[key] = value

    missing = [name for name in REQUIRED_FIELDS if name not in fields]
    if missing:
        raise TraceFormatError(
            f"Line {line_num} of {source_name} is missing required fields "
            f"{', '.join(missing)}: {repr(line)}",
            line_num,
            source_name,
        )

    kind = fields[FIELD_KIND]
    if kind not in PAYLOAD_TYPES:
        raise UnknownEventKindError(
            f"Line {line_num} of {source_name} has unknown event kind {repr(kind)}",
            line_num,
            source_name,
        )

    try:
        ts = float(fields[FIELD_TS])
        if not math.isfinite(ts):
            raise ValueError(f"Timestamp must be finite: {repr(fields[FIELD_TS])}")
        peer = PeerKey.from_endpoint(fields[FIELD_PEER], fields[FIELD_DIRECTION])
        payload_type = PAYLOAD_TYPES[kind]
        payload = payload_type.from_fields(fields) if payload_type is not None else None
        return ObservationEvent(ts, peer, kind, payload)
    except KeyError as err:
        raise TraceFormatError(
            f"Line {line_num} of {source_name} is missing field {err} required by {kind}",
            line_num,
            source_name,
        ) from err
    except ValueError as err:
        raise TraceFormatError(
            f"Line {line_num} of {source_name} could not be parsed: {err}",
            line_num,
            source_name,
        ) from err


def _data_lines(input_file: TextIO) -> Iterable[Tuple[int, str]]:
    for line_num, line in enumerate(input_file, 1):
        line = line.rstrip("\r\n")
        if not line.strip() or line.startswith(COMMENT_PREFIX):
            continue
        yield line_num, line


def ingest_trace(input_file: TextIO, source_name: str, *, strict: bool = False) -> TraceReadResult:
    events: List[ObservationEvent] = []
    line_nums: List[int] = []
    skipped: List[SkippedLine] = []
    for line_num, line in _data_lines(input_file):
        try:
            event = parse_event(line, line_num, source_name)
        except TraceFormatError as err:
            if strict:
                raise
            logger.warning("Skipping line %d of %s: %s", line_num, source_name, err)
            skipped.append(SkippedLine(line_num, str(err)))
            continue
        events.append(event)
        line_nums.append(line_num)
    return TraceReadResult(events, line_nums, skipped)


def read_trace(
    path: PathType, *, strict: bool = False, encoding: str = TRACE_ENCODING
) -> TraceReadResult:
    """Read a trace file, keeping the line number of every event and every skipped line.

    In strict mode, the first malformed line or unknown event kind raises
    TraceFormatError. Otherwise such lines are skipped and reported in the result.
    """
    with open(path, encoding=encoding) as input_file:
        return ingest_trace(input_file, str(path), strict=strict)


def read_events(path: PathType, *, strict: bool = False) -> List[ObservationEvent]:
    result = read_trace(path, strict=strict)
    if result.warning_count:
        logger.warning("Skipped %d line(s) while reading %s", result.warning_count, path)
    return list(result.events)


def check_order(events: Sequence[ObservationEvent], after: Optional[float] = None) -> None:
    prev_ts = after
    for idx, event in enumerate(events):
        if prev_ts is not None and event.ts < prev_ts:
            raise TraceOrderError(
                f"Event {idx} at {event.ts} for {event.peer} precedes the previous "
                f"timestamp {prev_ts}; events must be sorted by timestamp before writing"
            )
        prev_ts = event.ts


def _last_timestamp(input_file: TextIO) -> Optional[float]:
    last_line = None
    for _, line in _data_lines(input_file):
        last_line = line
    if last_line is None:
        return None
    for item in last_line.split(FIELD_DELIM):
        key, _, value = item.partition(KEY_VALUE_DELIM)
        if key == FIELD_TS:
            return float(value)
    return None


def _lock(file: IO) -> None:
    if fcntl is not None:
        fcntl.flock(file.fileno(), fcntl.LOCK_EX)


def write_events(
    path: PathType, events: Sequence[ObservationEvent], *, append: bool = False
) -> None:
    """Write events as trace lines, rejecting the whole batch if it is out of order.

    When appending, the batch must also not start before the last event already in the
    file. The file is held under an exclusive advisory lock while it is written.
    """
    check_order(events)
    mode = "a+" if append else "w"
    with open(path, mode, encoding=TRACE_ENCODING, newline="\n") as output_file:
        _lock(output_file)
        if append:
            output_file.seek(0)
            check_order(events, _last_timestamp(output_file))
            output_file.seek(0, 2)
        for event in events:
            print(format_event(event), file=output_file)


def peer_filename(identity: str) -> str:
    """Return a file name for a peer identity that is safe on common file systems."""
    return _UNSAFE_FILENAME_CHARS.sub("_", identity).strip("_") + ".csv"


def _csv_writer(file: TextIO) -> Any:
    return csv.writer(file, lineterminator=CSV_LINE_TERMINATOR)


def _sample_columns(sample: MeasurementSample) -> Tuple[List[str], List[str]]:
    return list(sample.numeric), list(sample.categorical)


def export_peer_csv(samples: Sequence[MeasurementSample], directory: PathType) -> Set[Path]:
    """Write one CSV per peer identity, each in chronological order.

    Files are named after the identity and overwritten, so the same samples always
    produce byte-identical files.
    """
    by_peer: Dict[str, List[MeasurementSample]] = {}
    for sample in samples:
        by_peer.setdefault(sample.peer, []).append(sample)

    out_dir = Path(directory)
    if by_peer:
        out_dir.mkdir(parents=True, exist_ok=True)

    written: Dict[Path, str] = {}
    for identity in sorted(by_peer):
        path = out_dir / peer_filename(identity)
        if path in written:
            raise ValueError(
                f"Peer identities {written[path]} and {identity} map to the same file {path}"
            )
        written[path] = identity

        peer_samples = sorted(by_peer[identity], key=lambda sample: sample.window_end)
        numeric_names, categorical_names = _sample_columns(peer_samples[0])
        header = (
            [COLUMN_WINDOW_START, COLUMN_WINDOW_END, COLUMN_PARTIAL]
            + numeric_names
            + categorical_names
            + [REMEMBRANCE_COLUMN, LABEL_COLUMN]
        )
        with open(path, "w", encoding="utf8", newline="") as output_file:
            writer = _csv_writer(output_file)
            writer.writerow(header)
            for sample in peer_samples:
                if _sample_columns(sample) != (numeric_names, categorical_names):
                    raise SchemaMismatchError(
                        f"Sample for {identity} at {sample.window_end} has different "
                        "feature columns than the first sample for that peer"
                    )
                window_start = (
                    format_float(sample.window_start) if sample.window_start is not None else ""
                )
                writer.writerow(
                    [window_start, format_float(sample.window_end), int(sample.partial)]
                    + [format_float(sample.numeric[name]) for name in numeric_names]
                    + [sample.categorical[name] for name in categorical_names]
                    + [format_float(sample.remembrance), format_float(sample.label)]
                )

    return set(written)


def write_dataset_csv(dataset: Dataset, path: PathType) -> None:
    """Write an encoded dataset as one CSV with peer, window end, columns and label."""
    with open(path, "w", encoding="utf8", newline="") as output_file:
        writer = _csv_writer(output_file)
        writer.writerow([COLUMN_PEER, COLUMN_WINDOW_END] + dataset.column_names() + [LABEL_COLUMN])
        for peer, window_end, row, label in zip(
            dataset.peers, dataset.window_ends, dataset.rows, dataset.labels
        ):
            writer.writerow(
                [peer, format_float(window_end)]
                + [format_float(value) for value in row]
                + [format_float(label)]
            )
