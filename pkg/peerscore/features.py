import hashlib
from collections import Counter
from typing import (
    Dict,
    Iterable,
    Iterator,
    List,
    Mapping,
    Optional,
    Sequence,
    Set,
    Tuple,
)

import numpy as np
from attr import attrib, attrs

from peerscore.model import (
    ACTIVITY_KINDS,
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
    AddrPayload,
    BlockPayload,
    FeeFilterPayload,
    HeightPayload,
    MsgPayload,
    ObservationEvent,
    PeerKey,
    RttPayload,
    TxPayload,
    address_family,
)
from peerscore.scoring import ScoreConfig, WindowRecord, score_trace
from peerscore.util import tuplify_strs

# Value used for any numeric signal a peer has not reported yet
MISSING_VALUE = -1.0
NO_COMMAND = "none"
DEFAULT_MI_BINS = 16
REMEMBRANCE_COLUMN = "remembrance"
LABEL_COLUMN = "label"

FEATURE_CONNECTION_COUNT = "connection_count"
FEATURE_TIMESTAMP = "timestamp"
FEATURE_PROTO_PING_RTT = "proto_ping_rtt_ms"
FEATURE_HEADER_HEIGHT_OFFSET = "header_height_offset"
FEATURE_PING_RTT = "ping_rtt_ms"
FEATURE_CONNECTION_DURATION = "connection_duration_s"
FEATURE_ADDR_ACCEPTED = "addr_accepted_count"
FEATURE_BLOCK_HEIGHT_OFFSET = "block_height_offset"
FEATURE_TIME_SINCE_LAST_TX = "time_since_last_tx_ms"
FEATURE_MIN_FEE_RATE = "min_fee_rate"
FEATURE_NOVEL_BLOCKS = "window_novel_blocks"
FEATURE_NOVEL_FEES = "window_novel_fees"
FEATURE_TX_BYTES = "window_tx_bytes"
MSG_COUNT_PREFIX = "msg_count_"

NUMERIC_FEATURES: Tuple[str, ...] = (
    FEATURE_CONNECTION_COUNT,
    FEATURE_TIMESTAMP,
    FEATURE_PROTO_PING_RTT,
    FEATURE_HEADER_HEIGHT_OFFSET,
    FEATURE_PING_RTT,
    FEATURE_CONNECTION_DURATION,
    FEATURE_ADDR_ACCEPTED,
    FEATURE_BLOCK_HEIGHT_OFFSET,
    FEATURE_TIME_SINCE_LAST_TX,
    FEATURE_MIN_FEE_RATE,
    FEATURE_NOVEL_BLOCKS,
    FEATURE_NOVEL_FEES,
    FEATURE_TX_BYTES,
) + tuple(MSG_COUNT_PREFIX + kind.lower() for kind in ACTIVITY_KINDS)

FEATURE_DIRECTION = "direction"
FEATURE_LAST_MSG_COMMAND = "last_msg_command"
FEATURE_ADDRESS_FAMILY = "address_family"
CATEGORICAL_FEATURES: Tuple[str, ...] = (
    FEATURE_DIRECTION,
    FEATURE_LAST_MSG_COMMAND,
    FEATURE_ADDRESS_FAMILY,
)


class SchemaMismatchError(ValueError):
    pass


def _dict_copy(mapping: Mapping) -> Dict:
    return dict(mapping)


@attrs(frozen=True, slots=True)
class MeasurementSample:
    peer: str = attrib()
    window_end: float = attrib()
    numeric: Dict[str, float] = attrib(converter=_dict_copy)
    categorical: Dict[str, str] = attrib(converter=_dict_copy)
    remembrance: float = attrib()
    label: float = attrib()
    window_start: Optional[float] = attrib(default=None, kw_only=True)
    partial: bool = attrib(default=False, kw_only=True)

    def __attrs_post_init__(self) -> None:
        for name, value in self.numeric.items():
            if not np.isfinite(value):
                raise ValueError(f"Numeric feature {name} is not finite: {value}")
        for name, token in self.categorical.items():
            if not token:
                raise ValueError(f"Categorical feature {name} has an empty token")


@attrs
class _SessionFeatures:
    peer: PeerKey = attrib()
    connect_ts: float = attrib()
    ping_rtt: float = attrib(default=MISSING_VALUE)
    proto_ping_rtt: float = attrib(default=MISSING_VALUE)
    headers_height: Optional[int] = attrib(default=None)
    block_height: Optional[int] = attrib(default=None)
    addr_total: int = attrib(default=0)
    last_tx_ts: Optional[float] = attrib(default=None)
    min_fee_rate: float = attrib(default=MISSING_VALUE)
    last_command: str = attrib(default=NO_COMMAND)
    window_counts: Counter = attrib(factory=Counter)
    window_tx_bytes: int = attrib(default=0)


class FeatureExtractor:
    """Window observer that snapshots per-peer networking behavior at each window end."""

    def __init__(self) -> None:
        self.samples: List[MeasurementSample] = []
        self._sessions: Dict[PeerKey, _SessionFeatures] = {}
        # Running maximum over every height report from any peer
        self._max_height: Optional[int] = None

    def _note_height(self, height: int) -> None:
        if self._max_height is None or height > self._max_height:
            self._max_height = height

    def _offset(self, height: Optional[int]) -> float:
        if height is None or self._max_height is None:
            return MISSING_VALUE
        return float(height - self._max_height)

    def event_applied(self, event: ObservationEvent) -> None:
        if event.kind == KIND_CONNECT:
            self._sessions[event.peer] = _SessionFeatures(event.peer, event.ts)
            return
        elif event.kind == KIND_DISCONNECT:
            self._sessions.pop(event.peer, None)
            return

        session = self._sessions[event.peer]
        session.window_counts[event.kind] += 1
        payload = event.payload
        if event.kind == KIND_BLOCK:
            assert isinstance(payload, BlockPayload)
            self._note_height(payload.height)
        elif event.kind == KIND_TX:
            assert isinstance(payload, TxPayload)
            session.last_tx_ts = event.ts
            session.window_tx_bytes += payload.size
        elif event.kind == KIND_PING_RTT:
            assert isinstance(payload, RttPayload)
            session.ping_rtt = payload.rtt_ms
        elif event.kind == KIND_PROTO_PING_RTT:
            assert isinstance(payload, RttPayload)
            session.proto_ping_rtt = payload.rtt_ms
        elif event.kind == KIND_ADDR:
            assert isinstance(payload, AddrPayload)
            session.addr_total += payload.count
        elif event.kind == KIND_HEADERS_HEIGHT:
            assert isinstance(payload, HeightPayload)
            session.headers_height = payload.height
            self._note_height(payload.height)
        elif event.kind == KIND_BLOCK_HEIGHT:
            assert isinstance(payload, HeightPayload)
            session.block_height = payload.height
            self._note_height(payload.height)
        elif event.kind == KIND_FEEFILTER:
            assert isinstance(payload, FeeFilterPayload)
            session.min_fee_rate = payload.min_fee_rate
        elif event.kind == KIND_MSG:
            assert isinstance(payload, MsgPayload)
            session.last_command = payload.command

    def window_closed(self, record: WindowRecord) -> None:
        session = self._sessions[record.peer]
        window_end = record.measurement.window_end
        time_since_tx = (
            (window_end - session.last_tx_ts) * 1000.0
            if session.last_tx_ts is not None
            else MISSING_VALUE
        )

        numeric = {
            FEATURE_CONNECTION_COUNT: float(len(self._sessions)),
            FEATURE_TIMESTAMP: window_end,
            FEATURE_PROTO_PING_RTT: session.proto_ping_rtt,
            FEATURE_HEADER_HEIGHT_OFFSET: self._offset(session.headers_height),
            FEATURE_PING_RTT: session.ping_rtt,
            FEATURE_CONNECTION_DURATION: window_end - session.connect_ts,
            FEATURE_ADDR_ACCEPTED: float(session.addr_total),
            FEATURE_BLOCK_HEIGHT_OFFSET: self._offset(session.block_height),
            FEATURE_TIME_SINCE_LAST_TX: time_since_tx,
            FEATURE_MIN_FEE_RATE: session.min_fee_rate,
            FEATURE_NOVEL_BLOCKS: float(record.measurement.f_block),
            FEATURE_NOVEL_FEES: record.measurement.f_fee,
            FEATURE_TX_BYTES: float(session.window_tx_bytes),
        }
        for kind in ACTIVITY_KINDS:
            numeric[MSG_COUNT_PREFIX + kind.lower()] = float(session.window_counts[kind])

        categorical = {
            FEATURE_DIRECTION: record.peer.direction,
            FEATURE_LAST_MSG_COMMAND: session.last_command,
            FEATURE_ADDRESS_FAMILY: address_family(record.peer.address),
        }

        self.samples.append(
            MeasurementSample(
                record.identity,
                window_end,
                numeric,
                categorical,
                record.state.s_prev,
                record.state.s_curr,
                window_start=record.measurement.window_start,
                partial=record.measurement.partial,
            )
        )
        session.window_counts.clear()
        session.window_tx_bytes = 0


def extract_windows(
    events: Iterable[ObservationEvent], config: ScoreConfig
) -> List[MeasurementSample]:
    """Score a trace and return one labeled feature sample per (peer, window)."""
    extractor = FeatureExtractor()
    score_trace(events, config, observer=extractor)
    return extractor.samples


def _tuplify_vocabularies(vocabularies: Iterable[Iterable[str]]) -> Tuple[Tuple[str, ...], ...]:
    return tuple(tuple(vocab) for vocab in vocabularies)


@attrs(frozen=True, slots=True)
class FeatureSchema:
    numeric_names: Tuple[str, ...] = attrib(converter=tuplify_strs)
    categorical_names: Tuple[str, ...] = attrib(converter=tuplify_strs)
    vocabularies: Tuple[Tuple[str, ...], ...] = attrib(converter=_tuplify_vocabularies)

    def __attrs_post_init__(self) -> None:
        names = self.numeric_names + self.categorical_names
        if len(set(names)) != len(names):
            raise ValueError(f"Feature names must be unique: {names}")
        if len(self.vocabularies) != len(self.categorical_names):
            raise ValueError(
                f"Got {len(self.vocabularies)} vocabularies for "
                f"{len(self.categorical_names)} categorical features"
            )

    @property
    def width(self) -> int:
        return len(self.numeric_names) + sum(len(vocab) for vocab in self.vocabularies)

    def column_names(self) -> List[str]:
        names = list(self.numeric_names)
        for name, vocab in zip(self.categorical_names, self.vocabularies):
            names.extend(f"{name}={token}" for token in vocab)
        return names

    def one_hot_mask(self) -> List[bool]:
        return [False] * len(self.numeric_names) + [True] * (
            self.width - len(self.numeric_names)
        )

    def fingerprint(self, include_remembrance: bool) -> str:
        names = self.column_names()
        if include_remembrance:
            names.append(REMEMBRANCE_COLUMN)
        return hashlib.sha256("\n".join(names).encode("utf8")).hexdigest()[:16]


def fit_encoder(
    samples: Sequence[MeasurementSample], *, exclude: Iterable[str] = ()
) -> FeatureSchema:
    """Freeze the feature layout and one-hot vocabularies from training samples.

    Vocabularies are the tokens seen in training, ordered lexicographically.
    """
    if not samples:
        raise ValueError("Cannot fit an encoder on an empty set of samples")

    excluded = set(exclude)
    numeric_names = [name for name in samples[0].numeric if name not in excluded]
    categorical_names = [name for name in samples[0].categorical if name not in excluded]

    vocabularies: List[Set[str]] = [set() for _ in categorical_names]
    for sample in samples:
        for vocab, name in zip(vocabularies, categorical_names):
            if name not in sample.categorical:
                raise SchemaMismatchError(
                    f"Sample for {sample.peer} at {sample.window_end} lacks "
                    f"categorical feature {name}"
                )
            vocab.add(sample.categorical[name])

    return FeatureSchema(
        numeric_names, categorical_names, [sorted(vocab) for vocab in vocabularies]
    )


@attrs(eq=False)
class Dataset:
    schema: FeatureSchema = attrib()
    rows: np.ndarray = attrib()
    labels: np.ndarray = attrib()
    remembrance_included: bool = attrib()
    window_ends: np.ndarray = attrib()
    peers: Tuple[str, ...] = attrib(converter=tuplify_strs)

    def __attrs_post_init__(self) -> None:
        n = len(self.labels)
        expected_width = self.schema.width + (1 if self.remembrance_included else 0)
        if self.rows.shape != (n, expected_width):
            raise SchemaMismatchError(
                f"Rows have shape {self.rows.shape}, expected ({n}, {expected_width})"
            )
        if len(self.window_ends) != n or len(self.peers) != n:
            raise ValueError("Window ends and peers must have one entry per row")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def width(self) -> int:
        return self.rows.shape[1]

    @property
    def fingerprint(self) -> str:
        return self.schema.fingerprint(self.remembrance_included)

    def column_names(self) -> List[str]:
        names = self.schema.column_names()
        if self.remembrance_included:
            names.append(REMEMBRANCE_COLUMN)
        return names

    def one_hot_mask(self) -> List[bool]:
        mask = self.schema.one_hot_mask()
        if self.remembrance_included:
            mask.append(False)
        return mask

    def take(self, indices: Sequence[int]) -> "Dataset":
        index = np.asarray(indices, dtype=int)
        return Dataset(
            self.schema,
            self.rows[index],
            self.labels[index],
            self.remembrance_included,
            self.window_ends[index],
            [self.peers[i] for i in index],
        )

    def slice(self, start: int, end: int) -> "Dataset":
        return Dataset(
            self.schema,
            self.rows[start:end],
            self.labels[start:end],
            self.remembrance_included,
            self.window_ends[start:end],
            self.peers[start:end],
        )


def encode(
    schema: FeatureSchema,
    samples: Sequence[MeasurementSample],
    include_remembrance: bool,
) -> Dataset:
    """Encode samples into a chronologically ordered numeric matrix.

    Categorical features expand to one-hot blocks; tokens outside the frozen
    vocabulary encode as all zeros. The remembrance value, if included, is the last
    column.
    """
    # Stable, so simultaneous windows keep their extraction order
    ordered = sorted(samples, key=lambda sample: sample.window_end)
    n = len(ordered)
    n_numeric = len(schema.numeric_names)
    width = schema.width + (1 if include_remembrance else 0)
    rows = np.zeros((n, width), dtype=float)

    offsets = []
    offset = n_numeric
    for vocab in schema.vocabularies:
        offsets.append({token: offset + idx for idx, token in enumerate(vocab)})
        offset += len(vocab)

    for row_idx, sample in enumerate(ordered):
        try:
            rows[row_idx, :n_numeric] = [sample.numeric[name] for name in schema.numeric_names]
            for name, columns in zip(schema.categorical_names, offsets):
                column = columns.get(sample.categorical[name])
                if column is not None:
                    rows[row_idx, column] = 1.0
        except KeyError as err:
            raise SchemaMismatchError(
                f"Sample for {sample.peer} at {sample.window_end} lacks feature {err}"
            ) from err
        if include_remembrance:
            rows[row_idx, -1] = sample.remembrance

    return Dataset(
        schema,
        rows,
        np.array([sample.label for sample in ordered], dtype=float),
        include_remembrance,
        np.array([sample.window_end for sample in ordered], dtype=float),
        [sample.peer for sample in ordered],
    )


@attrs(frozen=True, slots=True)
class MIRanking:
    entries: Tuple[Tuple[str, float], ...] = attrib(converter=tuple)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[Tuple[str, float]]:
        return iter(self.entries)

    def names(self) -> List[str]:
        return [name for name, _ in self.entries]

    def score_of(self, name: str) -> float:
        for entry_name, score in self.entries:
            if entry_name == name:
                return score
        raise KeyError(name)


def quantile_bins(values: np.ndarray, bins: int) -> np.ndarray:
    """Discretize values into equal-frequency bins, returning integer codes."""
    edges = np.quantile(values, np.linspace(0.0, 1.0, bins + 1)[1:-1])
    return np.searchsorted(edges, values, side="right")


def mutual_information_bits(x_codes: np.ndarray, y_codes: np.ndarray) -> float:
    """Mutual information in bits of two discrete variables from paired observations."""
    _, x_idx = np.unique(x_codes, return_inverse=True)
    _, y_idx = np.unique(y_codes, return_inverse=True)
    joint = np.zeros((x_idx.max() + 1, y_idx.max() + 1), dtype=float)
    np.add.at(joint, (x_idx, y_idx), 1.0)
    joint /= len(x_codes)

    p_x = joint.sum(axis=1, keepdims=True)
    p_y = joint.sum(axis=0, keepdims=True)
    nonzero = joint > 0
    mi = np.sum(joint[nonzero] * np.log2(joint[nonzero] / (p_x @ p_y)[nonzero]))
    # Rounding can leave independent variables a hair below zero
    return max(0.0, float(mi))


def mutual_information(dataset: Dataset, bins: int = DEFAULT_MI_BINS) -> MIRanking:
    """Rank every column by its mutual information with the label.

    Continuous columns and the label use quantile bins; one-hot columns are used
    as binary variables directly.
    """
    if bins < 2:
        raise ValueError(f"Need at least 2 bins, got {bins}")
    if not len(dataset):
        raise ValueError("Cannot compute mutual information on an empty dataset")

    label_codes = quantile_bins(dataset.labels, bins)
    entries = []
    for column, (name, one_hot) in enumerate(
        zip(dataset.column_names(), dataset.one_hot_mask())
    ):
        values = dataset.rows[:, column]
        codes = values.astype(int) if one_hot else quantile_bins(values, bins)
        entries.append((name, mutual_information_bits(codes, label_codes)))

    entries.sort(key=lambda entry: (-entry[1], entry[0]))
    return MIRanking(entries)


def select_top_k(ranking: MIRanking, k: int) -> List[str]:
    if not 1 <= k <= len(ranking):
        raise ValueError(f"k must be between 1 and {len(ranking)}, got {k}")
    return ranking.names()[:k]
