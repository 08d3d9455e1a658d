from typing import Iterable, List, Optional, Sequence, Set, Tuple

from attr import attrib, attrs

from peerscore.model import KIND_CONNECT, KIND_DISCONNECT, ObservationEvent, PeerKey

RULE_ORDER = "ts-order"
RULE_OUTSIDE_SESSION = "outside-session"
RULE_NESTED_SESSION = "nested-session"
RULE_UNMATCHED_DISCONNECT = "unmatched-disconnect"
SUPPORTED_RULES = (
    RULE_ORDER,
    RULE_OUTSIDE_SESSION,
    RULE_NESTED_SESSION,
    RULE_UNMATCHED_DISCONNECT,
)


@attrs(frozen=True, slots=True)
class TraceViolation:
    line_num: int = attrib()
    rule: str = attrib()
    msg: str = attrib()


def tuplify_violations(violations: Iterable[TraceViolation]) -> Tuple[TraceViolation, ...]:
    return tuple(violations)


@attrs(frozen=True)
class TraceValidationReport:
    event_count: int = attrib()
    peer_count: int = attrib()
    session_count: int = attrib()
    violations: Tuple[TraceViolation, ...] = attrib(converter=tuplify_violations)

    def is_valid(self) -> bool:
        return not self.violations

    def violations_for_rule(self, rule: str) -> List[TraceViolation]:
        return [violation for violation in self.violations if violation.rule == rule]

    def __len__(self) -> int:
        return len(self.violations)


def validate_trace(
    events: Sequence[ObservationEvent],
    *,
    line_nums: Optional[Sequence[int]] = None,
    source_name: Optional[str] = None,
) -> TraceValidationReport:
    """Check ordering and session bracketing, reporting every violation found.

    Violations are returned as data; nothing here raises for a malformed trace.
    """
    assert not line_nums or len(line_nums) == len(
        events
    ), "Line numbers and events must be the same length"

    violations: List[TraceViolation] = []
    open_sessions: Set[PeerKey] = set()
    peers: Set[PeerKey] = set()
    session_count = 0
    prev_ts: Optional[float] = None
    source_msg = f" of {source_name}" if source_name else ""

    for idx, event in enumerate(events):
        line_num = line_nums[idx] if line_nums else idx + 1
        peers.add(event.peer)

        if prev_ts is not None and event.ts < prev_ts:
            violations.append(
                TraceViolation(
                    line_num,
                    RULE_ORDER,
                    f"Timestamp {event.ts} on line {line_num}{source_msg} "
                    f"precedes the previous timestamp {prev_ts}",
                )
            )
        else:
            prev_ts = event.ts

        if event.kind == KIND_CONNECT:
            if event.peer in open_sessions:
                violations.append(
                    TraceViolation(
                        line_num,
                        RULE_NESTED_SESSION,
                        f"Nested session: {event.peer} connects on line {line_num}{source_msg} "
                        "while already connected",
                    )
                )
            else:
                open_sessions.add(event.peer)
                session_count += 1
        elif event.kind == KIND_DISCONNECT:
            if event.peer in open_sessions:
                open_sessions.remove(event.peer)
            else:
                violations.append(
                    TraceViolation(
                        line_num,
                        RULE_UNMATCHED_DISCONNECT,
                        f"Disconnect of {event.peer} on line {line_num}{source_msg} "
                        "without an open session",
                    )
                )
        elif event.peer not in open_sessions:
            violations.append(
                TraceViolation(
                    line_num,
                    RULE_OUTSIDE_SESSION,
                    f"Activity outside session: {event.kind} from {event.peer} "
                    f"on line {line_num}{source_msg}",
                )
            )

    return TraceValidationReport(len(events), len(peers), session_count, violations)
