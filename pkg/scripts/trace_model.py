"""
Trace Model for the SCFD detector
Parses Jsonl / strace text event logs into execution regions and builds
system-call frequency vectors (SCFDs) over a fixed syscall alphabet.
"""

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional

import numpy as np
from dateutil import parser as dateutil_parser

try:
    import config
    import errors
except ImportError:
    # Fallback if running from root
    from scripts import config
    from scripts import errors


class EventKind(str, Enum):
    CALL = config.JSONL_KIND_CALL
    BEGIN = config.JSONL_KIND_BEGIN
    END = config.JSONL_KIND_END


class TraceFormat(str, Enum):
    JSONL = "jsonl"
    STRACE = "strace"


class UnknownPolicy(str, Enum):
    REJECT = "reject"
    EXTEND = "extend"


@dataclass(frozen=True, slots=True)
class TraceEvent:
    kind: EventKind
    syscall_name: Optional[str] = None
    timestamp: Optional[float] = None

    def __post_init__(self):
        if self.kind is EventKind.CALL:
            if not self.syscall_name:
                raise ValueError("call events need a syscall name")
        elif self.syscall_name is not None:
            raise ValueError("region markers carry no syscall name")
        if self.timestamp is not None and self.timestamp < 0:
            raise ValueError("timestamp must be nonnegative")

    @classmethod
    def call(cls, name, timestamp=None):
        return cls(EventKind.CALL, name, timestamp)


class SyscallAlphabet:
    """Ordered, immutable registry of syscall names; position = SCFD coordinate."""

    __slots__ = ("_names", "_index")

    def __init__(self, names: Iterable[str]):
        names = tuple(names)
        index = {}
        for i, name in enumerate(names):
            if not name:
                raise ValueError("syscall names must be nonempty")
            if name in index:
                raise ValueError(f"duplicate syscall name '{name}'")
            index[name] = i
        self._names = names
        self._index = index

    @classmethod
    def from_names(cls, names: Iterable[str]) -> "SyscallAlphabet":
        return cls(sorted(set(names)))

    @property
    def names(self):
        return self._names

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise errors.UnknownSyscall(name) from None

    def extended(self, names: Iterable[str]) -> "SyscallAlphabet":
        new = sorted(set(n for n in names if n not in self._index))
        if not new:
            return self
        return SyscallAlphabet(self._names + tuple(new))

    def __contains__(self, name):
        return name in self._index

    def __len__(self):
        return len(self._names)

    def __iter__(self):
        return iter(self._names)

    def __eq__(self, other):
        return isinstance(other, SyscallAlphabet) and self._names == other._names

    def __hash__(self):
        return hash(self._names)

    def __repr__(self):
        return f"SyscallAlphabet({list(self._names)!r})"


@dataclass(frozen=True)
class ExecutionTrace:
    """
    One monitored execution. `events` holds Call events only; the region markers
    are reflected by `closed` (End marker seen) and `in_region` (False for calls
    observed outside any monitored region).
    """
    events: tuple
    source_id: str = ""
    closed: bool = True
    in_region: bool = True

    @classmethod
    def from_calls(cls, names, source_id="", closed=True, in_region=True):
        return cls(tuple(TraceEvent.call(n) for n in names), source_id, closed, in_region)

    @property
    def calls(self):
        return [e.syscall_name for e in self.events]

    def __len__(self):
        return len(self.events)


@dataclass(frozen=True, eq=False)
class Scfd:
    alphabet: SyscallAlphabet
    counts: np.ndarray

    def __post_init__(self):
        if self.counts.shape != (len(self.alphabet),):
            raise errors.DimensionMismatch(len(self.alphabet), self.counts.shape[0])
        if (self.counts < 0).any():
            raise ValueError("SCFD counts must be nonnegative")
        self.counts.setflags(write=False)


@dataclass(frozen=True, eq=False)
class TrainingSet:
    alphabet: SyscallAlphabet
    matrix: np.ndarray  # N x D, int64
    source_ids: tuple = field(default=())

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 1:
            raise errors.EmptyInput("training set needs at least one row")
        if self.matrix.shape[1] != len(self.alphabet):
            raise errors.DimensionMismatch(len(self.alphabet), self.matrix.shape[1])
        self.matrix.setflags(write=False)

    @property
    def rows(self):
        return [Scfd(self.alphabet, row.copy()) for row in self.matrix]

    def __len__(self):
        return self.matrix.shape[0]


# ---------------------------------------------------------------------------
# SCFD construction
# ---------------------------------------------------------------------------

def build_scfd(trace: ExecutionTrace, alphabet: SyscallAlphabet,
               on_unknown: UnknownPolicy = UnknownPolicy.REJECT) -> Scfd:
    counts = Counter(trace.calls)
    if on_unknown is UnknownPolicy.EXTEND:
        alphabet = alphabet.extended(counts)
    vec = np.zeros(len(alphabet), dtype=np.int64)
    for name, n in counts.items():
        vec[alphabet.index(name)] = n
    return Scfd(alphabet, vec)


def load_training_set(traces) -> TrainingSet:
    traces = list(traces)
    if not traces:
        raise errors.EmptyInput("no traces to train on")
    per_trace = [Counter(t.calls) for t in traces]
    alphabet = SyscallAlphabet.from_names(name for c in per_trace for name in c)
    matrix = np.zeros((len(traces), len(alphabet)), dtype=np.int64)
    for row, counts in enumerate(per_trace):
        for name, n in counts.items():
            matrix[row, alphabet.index(name)] = n
    return TrainingSet(alphabet, matrix, tuple(t.source_id for t in traces))


# ---------------------------------------------------------------------------
# Line decoders
# ---------------------------------------------------------------------------

_CALL_RE = re.compile(r'^([A-Za-z_][A-Za-z0-9_]*)\((.*)\)\s*=\s*(.+)$')
_UNFINISHED_RE = re.compile(r'^([A-Za-z_][A-Za-z0-9_]*)\((.*)<unfinished \.\.\.>\s*$')
_RESUMED_RE = re.compile(r'^<\.\.\. ([A-Za-z_][A-Za-z0-9_]*) resumed>(.*)$')
_TS_RE = re.compile(r'^(\d+\.\d+|\d{1,2}:\d{2}:\d{2}(?:\.\d+)?)\s+(.*)$')
_PID_RE = re.compile(r'^\[pid\s+\d+\]\s*(.*)$')


def _parse_strace_ts(token):
    if ':' not in token:
        return float(token)
    # Wall clock form (-t / -tt): seconds since midnight
    t = dateutil_parser.parse(token)
    return t.hour * 3600 + t.minute * 60 + t.second + t.microsecond / 1e6


def _decode_strace(lines):
    """Yields (line_no, TraceEvent) for every line that carries an event."""
    for line_no, raw in lines:
        line = raw.strip()
        if not line:
            continue
        if line == config.STRACE_REGION_BEGIN:
            yield line_no, TraceEvent(EventKind.BEGIN)
            continue
        if line == config.STRACE_REGION_END:
            yield line_no, TraceEvent(EventKind.END)
            continue

        m = _PID_RE.match(line)
        if m:
            line = m.group(1)  # strace -f child prefix

        ts = None
        m = _TS_RE.match(line)
        if m:
            try:
                ts = _parse_strace_ts(m.group(1))
            except (ValueError, OverflowError):
                raise errors.MalformedLine(line_no, "bad timestamp") from None
            line = m.group(2)

        if line.startswith('---') and line.endswith('---'):
            continue  # signal delivery
        if line.startswith('+++') and line.endswith('+++'):
            continue  # process exit

        m = _RESUMED_RE.match(line)
        if m:
            # Counted once, here
            yield line_no, TraceEvent.call(m.group(1), ts)
            continue
        if _UNFINISHED_RE.match(line):
            continue
        m = _CALL_RE.match(line)
        if m:
            yield line_no, TraceEvent.call(m.group(1), ts)
            continue
        raise errors.MalformedLine(line_no, "unrecognised strace line")


def _decode_jsonl(lines):
    kinds = {k.value: k for k in EventKind}
    for line_no, raw in lines:
        line = raw.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise errors.MalformedLine(line_no, str(e)) from None
        if not isinstance(obj, dict) or obj.get("kind") not in kinds:
            raise errors.MalformedLine(line_no, "missing or unknown 'kind'")
        ts = obj.get("ts")
        if ts is not None and (isinstance(ts, bool) or not isinstance(ts, (int, float))
                               or (isinstance(ts, float) and not math.isfinite(ts)) or ts < 0):
            raise errors.MalformedLine(line_no, "'ts' must be a finite nonnegative number")
        name = obj.get("name")
        kind = kinds[obj["kind"]]
        if kind is EventKind.CALL and (not isinstance(name, str) or not name):
            raise errors.MalformedLine(line_no, "call without a name")
        if kind is not EventKind.CALL and name is not None:
            raise errors.MalformedLine(line_no, "region marker with a name")
        yield line_no, TraceEvent(kind, name, None if ts is None else float(ts))


# ---------------------------------------------------------------------------
# Region framing
# ---------------------------------------------------------------------------

def _frame_regions(decoded, source, watchdog):
    traces = []
    region = None
    region_count = 0
    loose = []
    loose_line = 0
    last_line = 0

    def flush_loose():
        if loose:
            traces.append(ExecutionTrace(tuple(loose), f"{source}:out-of-region@{loose_line}",
                                         closed=False, in_region=False))
            loose.clear()

    def close_region(closed):
        nonlocal region, region_count
        traces.append(ExecutionTrace(tuple(region), f"{source}#{region_count}", closed=closed))
        region_count += 1
        region = None

    for line_no, event in decoded:
        last_line = line_no
        if event.kind is EventKind.BEGIN:
            if region is not None:
                if not watchdog:
                    raise errors.UnbalancedRegion(line_no)
                close_region(closed=False)
            flush_loose()
            region = []
        elif event.kind is EventKind.END:
            if region is None:
                raise errors.UnbalancedRegion(line_no)
            close_region(closed=True)
        elif region is not None:
            region.append(event)
        else:
            if not loose:
                loose_line = line_no
            loose.append(event)

    if region is not None:
        if not watchdog:
            raise errors.UnbalancedRegion(last_line)
        close_region(closed=False)
    flush_loose()
    return traces


def parse_event_log(stream, fmt: TraceFormat = TraceFormat.JSONL, watchdog: bool = False,
                    source_id: Optional[str] = None):
    """
    Parse a text stream into ExecutionTraces, in input order.

    Calls outside any region become out-of-region traces (one per contiguous run).
    With watchdog=True a region left open (new Begin or end of input) is closed
    as an unfinished trace instead of raising UnbalancedRegion.
    """
    fmt = TraceFormat(fmt)
    source = source_id or getattr(stream, "name", "stream")
    lines = enumerate((raw.rstrip("\r\n") for raw in stream), start=1)
    decoder = _decode_jsonl if fmt is TraceFormat.JSONL else _decode_strace
    return _frame_regions(decoder(lines), source, watchdog)


def write_event_log(traces, stream):
    for trace in traces:
        if trace.in_region:
            stream.write(json.dumps({"kind": EventKind.BEGIN.value}) + "\n")
        for event in trace.events:
            obj = {"kind": EventKind.CALL.value, "name": event.syscall_name}
            if event.timestamp is not None:
                obj["ts"] = event.timestamp
            stream.write(json.dumps(obj) + "\n")
        if trace.in_region and trace.closed:
            stream.write(json.dumps({"kind": EventKind.END.value}) + "\n")


def _utf8_lines(f):
    for line_no, raw in enumerate(f, start=1):
        try:
            yield raw.decode("utf-8")
        except UnicodeDecodeError:
            raise errors.MalformedLine(line_no, "invalid UTF-8") from None


def read_traces(path, fmt: TraceFormat = TraceFormat.JSONL, watchdog: bool = True):
    with open(path, "rb") as f:
        return parse_event_log(_utf8_lines(f), fmt, watchdog=watchdog, source_id=str(path))


def write_traces(traces, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        write_event_log(traces, f)
