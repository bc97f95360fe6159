"""Per-rank trace files and the merged Chrome Tracing document.

Per-rank file (one per rank)::

    {"rank": 3,
     "traceEvents": [{"name": "forward", "cat": "compute", "ph": "X",
                      "ts": 1200, "dur": 950, "tid": 0,
                      "args": {"microbatch_id": 0, "chunk_id": 0}}, ...]}

A bare JSON array of events is also accepted when the rank is passed
explicitly. The merged document uses the Chrome Tracing *object* form
``{"traceEvents": [...], "displayTimeUnit": "ms", "otherData": {...}}`` with
``pid`` equal to the rank. Event metadata is carried in ``args`` under fixed
keys; keys this package does not know are passed through unchanged.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .errors import TraceParseError, TraceSchemaError
from .model import EventKind, EventMeta, Phase, RankTrace, TraceEvent

logger = logging.getLogger(__name__)

META_KEYS = (
    "microbatch_id",
    "chunk_id",
    "payload_bytes",
    "participant_ranks",
    "peer_rank",
    "phase",
    "sync_instance_id",
)

# Presentational swimlanes.
TID_COMPUTE = 0
TID_COLLECTIVE = 1
TID_P2P = 2


def tid_for(kind: EventKind) -> int:
    if kind.is_collective:
        return TID_COLLECTIVE
    if kind.is_p2p:
        return TID_P2P
    return TID_COMPUTE


@dataclass(frozen=True)
class ChromeEvent:
    name: str
    cat: str
    ph: str
    ts: int
    dur: int
    pid: int
    tid: int
    args: Mapping[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "cat": self.cat,
            "ph": self.ph,
            "ts": self.ts,
            "dur": self.dur,
            "pid": self.pid,
            "tid": self.tid,
            "args": dict(self.args),
        }


@dataclass(frozen=True)
class ChromeTraceDoc:
    events: tuple[ChromeEvent, ...] = ()
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def ranks(self) -> list[int]:
        return sorted({e.pid for e in self.events})


def merge_sort_key(ev: ChromeEvent) -> tuple[int, int, str]:
    return (ev.ts, ev.pid, ev.name)


# --------------------------------------------------------------------------- #
# TraceEvent <-> ChromeEvent
# --------------------------------------------------------------------------- #


def meta_to_args(meta: EventMeta) -> dict[str, Any]:
    args: dict[str, Any] = dict(meta.extra)
    for key in META_KEYS:
        value = getattr(meta, key)
        if value is None:
            continue
        if key == "participant_ranks":
            value = list(value)
        elif key == "phase":
            value = value.value
        args[key] = value
    return args


def _opt_int(args: Mapping[str, Any], key: str) -> int | None:
    value = args.get(key)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value) or value < 0:
        raise TraceSchemaError(f"args.{key} must be a non-negative integer, got {value!r}", key)
    return int(value)


def args_to_meta(args: Mapping[str, Any]) -> EventMeta:
    if not isinstance(args, Mapping):
        raise TraceSchemaError("args must be an object", "args")
    participants = args.get("participant_ranks")
    if participants is not None:
        if not isinstance(participants, list) or not all(isinstance(r, int) and r >= 0 for r in participants):
            raise TraceSchemaError("args.participant_ranks must be a list of ranks", "participant_ranks")
        participants = tuple(sorted(participants))
    phase = args.get("phase")
    if phase is not None:
        try:
            phase = Phase(phase)
        except ValueError:
            raise TraceSchemaError(f"unknown phase {phase!r}", "phase") from None
    sync_id = args.get("sync_instance_id")
    if sync_id is not None and not isinstance(sync_id, str):
        raise TraceSchemaError("args.sync_instance_id must be a string", "sync_instance_id")
    return EventMeta(
        microbatch_id=_opt_int(args, "microbatch_id"),
        chunk_id=_opt_int(args, "chunk_id"),
        payload_bytes=_opt_int(args, "payload_bytes"),
        participant_ranks=participants,
        peer_rank=_opt_int(args, "peer_rank"),
        phase=phase,
        sync_instance_id=sync_id,
        extra={k: v for k, v in args.items() if k not in META_KEYS},
    )


def to_chrome_event(ev: TraceEvent) -> ChromeEvent:
    return ChromeEvent(
        name=ev.name,
        cat=ev.kind.value,
        ph="X",
        ts=ev.start_ts_us,
        dur=ev.duration_us,
        pid=ev.rank,
        tid=tid_for(ev.kind),
        args=meta_to_args(ev.meta),
    )


def from_chrome_event(ev: ChromeEvent) -> TraceEvent:
    try:
        kind = EventKind(ev.cat)
    except ValueError:
        raise TraceSchemaError(f"unknown event category {ev.cat!r}", "cat") from None
    return TraceEvent(ev.name, kind, ev.pid, ev.ts, ev.dur, args_to_meta(ev.args))


# --------------------------------------------------------------------------- #
# Decoding helpers
# --------------------------------------------------------------------------- #


def _decode_json(data: bytes | str) -> Any:
    if isinstance(data, bytes):
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise TraceParseError(f"invalid UTF-8: {exc.reason}", exc.start) from None
    else:
        text = data
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise TraceParseError(f"malformed JSON: {exc.msg}", offset) from None


def _int_field(raw: Mapping[str, Any], key: str, index: int) -> int:
    if key not in raw:
        raise TraceSchemaError(f"event {index}: missing required field {key!r}", key)
    value = raw[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise TraceSchemaError(f"event {index}: field {key!r} must be a finite number", key)
    return int(round(value))


def _raw_to_chrome(raw: Any, index: int, pid: int | None) -> ChromeEvent | None:
    if not isinstance(raw, Mapping):
        raise TraceSchemaError(f"event {index}: expected an object", "traceEvents")
    ph = raw.get("ph", "X")
    if ph != "X":
        # metadata/instant events carry no span; they are not part of the model
        return None
    if "name" not in raw:
        raise TraceSchemaError(f"event {index}: missing required field 'name'", "name")
    if not isinstance(raw["name"], str):
        raise TraceSchemaError(f"event {index}: field 'name' must be a string", "name")
    ts = _int_field(raw, "ts", index)
    dur = _int_field(raw, "dur", index)
    if dur < 0:
        raise TraceSchemaError(f"event {index}: negative dur {dur}", "dur")
    if pid is None:
        pid = _int_field(raw, "pid", index)
    if pid < 0:
        raise TraceSchemaError(f"event {index}: negative pid {pid}", "pid")
    cat = raw.get("cat", EventKind.COMPUTE.value)
    try:
        kind = EventKind(cat)
    except ValueError:
        raise TraceSchemaError(f"event {index}: unknown category {cat!r}", "cat") from None
    args = raw.get("args", {})
    if not isinstance(args, Mapping):
        raise TraceSchemaError(f"event {index}: args must be an object", "args")
    tid = raw.get("tid", tid_for(kind))
    if isinstance(tid, bool) or not isinstance(tid, int):
        raise TraceSchemaError(f"event {index}: tid must be an integer", "tid")
    return ChromeEvent(raw["name"], cat, "X", ts, dur, pid, tid, dict(args))


# --------------------------------------------------------------------------- #
# Per-rank files
# --------------------------------------------------------------------------- #


def parse_rank_trace(data: bytes | str, rank: int | None = None) -> RankTrace:
    """Parse one per-rank trace file.

    Args:
        data: UTF-8 JSON, either ``{"rank": r, "traceEvents": [...]}`` or a bare
            event array.
        rank: required for the bare-array form; overrides nothing otherwise
            but must agree with the file's ``rank`` if both are given.

    Raises:
        TraceParseError: the input is not valid JSON (carries the byte offset).
        TraceSchemaError: a required field is missing or invalid.
    """
    doc = _decode_json(data)
    if isinstance(doc, list):
        raw_events = doc
        file_rank = None
    elif isinstance(doc, Mapping):
        raw_events = doc.get("traceEvents")
        if not isinstance(raw_events, list):
            raise TraceSchemaError("missing required field 'traceEvents'", "traceEvents")
        file_rank = doc.get("rank")
        if file_rank is not None and (isinstance(file_rank, bool) or not isinstance(file_rank, int) or file_rank < 0):
            raise TraceSchemaError("field 'rank' must be a non-negative integer", "rank")
    else:
        raise TraceSchemaError("per-rank trace must be an object or array", "traceEvents")
    if file_rank is None and rank is None:
        raise TraceSchemaError("missing required field 'rank'", "rank")
    if file_rank is not None and rank is not None and file_rank != rank:
        raise TraceSchemaError(f"file declares rank {file_rank}, caller expected {rank}", "rank")
    owner = file_rank if file_rank is not None else rank

    events = []
    for i, raw in enumerate(raw_events):
        if isinstance(raw, Mapping) and "pid" in raw and raw["pid"] != owner:
            raise TraceSchemaError(f"event {i}: pid {raw['pid']} differs from rank {owner}", "pid")
        ce = _raw_to_chrome(raw, i, owner)
        if ce is not None:
            events.append(from_chrome_event(ce))
    return RankTrace.from_events(owner, events)


def emit_rank_trace(trace: RankTrace) -> bytes:
    events = []
    for ev in trace.events:
        d = to_chrome_event(ev).to_json()
        del d["pid"]
        events.append(d)
    return _dump({"rank": trace.rank, "traceEvents": events})


# --------------------------------------------------------------------------- #
# Merged document
# --------------------------------------------------------------------------- #


def merge_traces(traces: Iterable[RankTrace], metadata: Mapping[str, Any] | None = None) -> ChromeTraceDoc:
    """Merge per-rank traces into one time-ordered document (ties: rank, then name)."""
    seen: set[int] = set()
    events: list[ChromeEvent] = []
    for trace in sorted(traces, key=lambda t: t.rank):
        if trace.rank in seen:
            raise ValueError(f"duplicate trace for rank {trace.rank}")
        seen.add(trace.rank)
        events.extend(to_chrome_event(ev) for ev in trace.events)
    events.sort(key=merge_sort_key)
    return ChromeTraceDoc(tuple(events), dict(metadata or {}))


def doc_to_traces(doc: ChromeTraceDoc) -> list[RankTrace]:
    """Split a merged document back into per-rank traces (ascending rank)."""
    by_rank: dict[int, list[TraceEvent]] = {}
    for ce in doc.events:
        by_rank.setdefault(ce.pid, []).append(from_chrome_event(ce))
    return [RankTrace.from_events(r, evs) for r, evs in sorted(by_rank.items())]


def rank_sequence_index(doc: ChromeTraceDoc) -> list[tuple[int, int]]:
    """For each doc event, its ``(rank, position)`` in :func:`doc_to_traces` order.

    Valid because the merge order restricted to one rank coincides with the
    canonical per-rank order (start time, then name, then original order).
    """
    per_rank: dict[int, list[int]] = {}
    for i, ce in enumerate(doc.events):
        per_rank.setdefault(ce.pid, []).append(i)
    out: list[tuple[int, int]] = [(0, 0)] * len(doc.events)
    for rank, idxs in per_rank.items():
        ordered = sorted(idxs, key=lambda i: (doc.events[i].ts, doc.events[i].name, i))
        for pos, i in enumerate(ordered):
            out[i] = (rank, pos)
    return out


def _dump(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def emit_chrome_trace(doc: ChromeTraceDoc) -> bytes:
    return _dump(
        {
            "traceEvents": [e.to_json() for e in doc.events],
            "displayTimeUnit": "ms",
            "otherData": dict(doc.metadata),
        }
    )


def parse_chrome_trace(data: bytes | str) -> ChromeTraceDoc:
    """Parse a merged trace in either Chrome container form (object or bare array)."""
    obj = _decode_json(data)
    if isinstance(obj, list):
        raw_events, metadata = obj, {}
    elif isinstance(obj, Mapping):
        raw_events = obj.get("traceEvents")
        if not isinstance(raw_events, list):
            raise TraceSchemaError("missing required field 'traceEvents'", "traceEvents")
        metadata = obj.get("otherData", {})
        if not isinstance(metadata, Mapping):
            raise TraceSchemaError("otherData must be an object", "otherData")
    else:
        raise TraceSchemaError("trace must be an object or array", "traceEvents")
    events = []
    skipped = 0
    for i, raw in enumerate(raw_events):
        ce = _raw_to_chrome(raw, i, None)
        if ce is None:
            skipped += 1
        else:
            events.append(ce)
    if skipped:
        logger.debug("ignored %d non-span events", skipped)
    events.sort(key=merge_sort_key)
    return ChromeTraceDoc(tuple(events), dict(metadata))


def read_chrome_trace(path: str | Path) -> ChromeTraceDoc:
    return parse_chrome_trace(Path(path).read_bytes())


def write_chrome_trace(doc: ChromeTraceDoc, path: str | Path) -> None:
    Path(path).write_bytes(emit_chrome_trace(doc))


def read_rank_traces(directory: str | Path) -> list[RankTrace]:
    """Parse every ``*.json`` file in ``directory`` as a per-rank trace."""
    traces = [parse_rank_trace(p.read_bytes()) for p in sorted(Path(directory).glob("*.json"))]
    return sorted(traces, key=lambda t: t.rank)


# --------------------------------------------------------------------------- #
# Validation
# --------------------------------------------------------------------------- #


def chrome_trace_schema() -> dict[str, Any]:
    text = resources.files("megatrace").joinpath("data/chrome_trace.schema.json").read_text("utf-8")
    return json.loads(text)


def validate_chrome_trace(data: bytes | str | Mapping[str, Any] | list) -> list[str]:
    """Validate a Chrome Tracing document; return warnings, raise on errors.

    Errors are JSON-schema violations. Warnings flag content the viewer
    accepts but this package cannot interpret (complete events without
    ``dur``, unknown categories).
    """
    import jsonschema

    obj = _decode_json(data) if isinstance(data, (bytes, str)) else data
    validator = jsonschema.Draft7Validator(chrome_trace_schema())
    errors = sorted(validator.iter_errors(obj), key=lambda e: list(e.path))
    if errors:
        first = errors[0]
        path = "/".join(str(p) for p in first.path)
        raise TraceSchemaError(f"schema violation at /{path}: {first.message}", path or None)

    warnings: list[str] = []
    raw_events = obj if isinstance(obj, list) else obj.get("traceEvents", [])
    for i, ev in enumerate(raw_events):
        if ev.get("ph") == "X" and "dur" not in ev:
            warnings.append(f"event {i}: complete event without dur")
        if ev.get("ph") == "X" and ev.get("cat") not in {k.value for k in EventKind}:
            warnings.append(f"event {i}: unknown category {ev.get('cat')!r}")
    return warnings
