"""Clock alignment of per-rank traces using collective instances as anchors.

Members of a synchronous collective cannot leave it before its last
participant arrives, so each matched collective gives one calibration point:
every member's local end time must map to the same aligned end. The aligned
end of an instance is the maximum over its already-aligned members.

Ranks are aligned in breadth-first order from the reference over the
"shares a collective" graph. For each rank the offset (aligned - local) is
known exactly at its anchors, interpolated linearly in between (this absorbs
linear clock drift), and held constant before the first and after the last
anchor. Point-to-point transfers are not anchors: their start and end skew is
legitimately shaped by the pipeline schedule.

Within the half-microsecond window that still rounds to an anchor's target,
the offset is placed on a per-rank linear drift model solved jointly over all
collectives, which keeps integer timestamp quantisation from accumulating
along the breadth-first chain. A collective whose end is one of the rank's
anchors is mapped through that end, which makes every anchor exact after
rounding; all other events are mapped through their start.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .dependency import CommInstance
from .model import RankTrace, TraceEvent, traces_by_rank
from .trace_io import ChromeEvent, ChromeTraceDoc, doc_to_traces, merge_sort_key, rank_sequence_index

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClockMap:
    """Piecewise-linear offset function for one rank.

    ``segments`` holds ``(anchor_local_ts_us, offset_us)`` pairs with strictly
    increasing anchors. An empty map is the identity.
    """

    rank: int
    segments: tuple[tuple[int, float], ...] = ()

    def offset_at(self, local_ts: float | np.ndarray) -> float | np.ndarray:
        if not self.segments:
            return np.zeros_like(local_ts, dtype=float) if isinstance(local_ts, np.ndarray) else 0.0
        xs = np.fromiter((s[0] for s in self.segments), dtype=float, count=len(self.segments))
        ys = np.fromiter((s[1] for s in self.segments), dtype=float, count=len(self.segments))
        out = np.interp(local_ts, xs, ys)
        return out if isinstance(local_ts, np.ndarray) else float(out)

    def to_json(self) -> dict[str, Any]:
        return {"rank": self.rank, "segments": [[t, o] for t, o in self.segments]}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "ClockMap":
        return cls(int(obj["rank"]), tuple((int(t), float(o)) for t, o in obj["segments"]))


@dataclass
class AlignmentReport:
    reference: int
    per_rank: dict[int, tuple[int, int]] = field(default_factory=dict)
    unaligned_ranks: list[int] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "reference": self.reference,
            "per_rank": {
                str(r): {"anchor_count": n, "max_residual_us": res} for r, (n, res) in sorted(self.per_rank.items())
            },
            "unaligned_ranks": list(self.unaligned_ranks),
        }


def build_anchors(instances: Iterable[CommInstance]) -> dict[int, list[tuple[int, str]]]:
    """Per rank, the chronological ``(local_end_ts, instance_id)`` of its collectives."""
    anchors: dict[int, list[tuple[int, str]]] = defaultdict(list)
    for inst in instances:
        if not inst.kind.is_collective:
            continue
        for rank, ref in inst.members.items():
            anchors[rank].append((ref.event.end_ts_us, inst.instance_id))
    return {r: sorted(v) for r, v in sorted(anchors.items())}


def _round(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5).astype(np.int64)


def _exact_starts(events: Sequence[TraceEvent], cmap: ClockMap) -> np.ndarray:
    anchors = {t for t, _ in cmap.segments}
    pivot = np.array(
        [ev.end_ts_us if ev.kind.is_collective and ev.end_ts_us in anchors else ev.start_ts_us for ev in events],
        dtype=float,
    )
    starts = np.array([ev.start_ts_us for ev in events], dtype=float)
    return starts + np.asarray(cmap.offset_at(pivot))


def aligned_starts(events: Sequence[TraceEvent], cmap: ClockMap) -> list[int]:
    """Aligned start timestamps of a rank's events (in canonical order).

    The result is kept ordered like the input: strictly increasing where the
    local starts were strictly increasing, so alignment never reorders a rank.
    """
    if not events:
        return []
    starts = [ev.start_ts_us for ev in events]
    out = _round(_exact_starts(events, cmap)).tolist()
    for i in range(1, len(out)):
        floor = out[i - 1] + (1 if starts[i] > starts[i - 1] else 0)
        if out[i] < floor:
            out[i] = floor
    return out


# How far inside the half-open rounding window an anchor offset may move.
_SNAP = 0.49
# Above this the dense joint drift solve is skipped and each rank fits its own line.
_JOINT_MAX_RANKS = 512


def _drift_model(
    collectives: Sequence[CommInstance], reference: int, ranks: Iterable[int]
) -> tuple[float, dict[int, tuple[float, float]]]:
    """Joint least-squares linear clock model ``offset_r(x) = a_r + b_r * (x - centre)``.

    ``x`` is local time in microseconds and ``b_r`` is in microseconds per
    second; returns ``(centre, {rank: (a_r, b_r)})``.

    Every collective contributes "all members end together" equations, so each
    rank's drift is estimated from all of its anchors at once rather than
    through a chain of partners, and per-timestamp quantisation averages out.
    The reference is fixed at zero. A small ridge on the slopes keeps ranks
    with anchors at a single instant well posed.
    """
    ranks = [r for r in sorted(ranks) if r != reference]
    if len(ranks) > _JOINT_MAX_RANKS:
        return 0.0, {}
    col = {r: 2 * i for i, r in enumerate(ranks)}
    n = 2 * len(ranks)
    ends = [ref.event.end_ts_us for inst in collectives for ref in inst.members.values()]
    if n == 0 or not ends:
        return 0.0, {}
    centre = float(np.mean(ends))
    ata = np.zeros((n, n))
    atb = np.zeros(n)
    for inst in collectives:
        members = [m for m in inst.members if m == reference or m in col]
        if len(members) < 2:
            continue
        base = members[0]
        xb = inst.members[base].event.end_ts_us
        for m in members[1:]:
            xm = inst.members[m].event.end_ts_us
            row = np.zeros(n)
            for r, x, sign in ((m, xm, 1.0), (base, xb, -1.0)):
                if r in col:
                    row[col[r]] += sign
                    row[col[r] + 1] += sign * (x - centre) * 1e-6
            ata += np.outer(row, row)
            atb += row * (xb - xm)
    ata[1::2, 1::2] += np.eye(len(ranks)) * 1e-9
    sol = np.linalg.lstsq(ata, atb, rcond=None)[0]
    return centre, {r: (float(sol[c]), float(sol[c + 1])) for r, c in col.items()}


def _fit_offsets(
    points: Mapping[int, float], model: tuple[float, float] | None = None, centre: float = 0.0
) -> tuple[tuple[int, float], ...]:
    """Anchor offsets from ``{local_end: target_offset}``.

    Local timestamps are integer microseconds, so a raw anchor offset carries
    up to half a microsecond of quantisation and a drifting clock shows up as
    unit steps. Interpolating those steps directly would smear each one over a
    whole inter-anchor gap. Each offset is instead taken from a smooth drift
    line (``model``, or a least-squares line through the raw offsets) and
    clamped to stay within the window that still rounds to the exact anchor
    target.
    """
    xs = np.array(sorted(points), dtype=float)
    raw = np.array([points[int(x)] for x in xs])
    exact = np.floor(xs + raw + 0.5) - xs
    if model is not None:
        fitted = model[0] + model[1] * (xs - centre) * 1e-6
    elif len(xs) >= 2:
        centre = xs.mean()
        slope, intercept = np.polyfit(xs - centre, raw, 1)
        fitted = intercept + slope * (xs - centre)
    else:
        fitted = exact
    offsets = np.clip(fitted, exact - _SNAP, exact + _SNAP)
    return tuple(zip(xs.astype(int).tolist(), offsets.tolist()))


def align(
    traces: Sequence[RankTrace], instances: Sequence[CommInstance], reference: int = 0
) -> tuple[list[ClockMap], AlignmentReport]:
    """Compute per-rank clock maps onto ``reference``'s clock.

    Returns one :class:`ClockMap` per trace (ascending rank) and a report. Ranks
    not connected to the reference through collectives get an identity map and
    are listed in ``report.unaligned_ranks``.
    """
    by_rank = traces_by_rank(traces)
    if reference not in by_rank:
        raise ValueError(f"reference rank {reference} has no trace")

    collectives = [inst for inst in instances if inst.kind.is_collective]
    joined: dict[int, list[CommInstance]] = defaultdict(list)
    neighbours: dict[int, set[int]] = defaultdict(set)
    for inst in collectives:
        ranks = [r for r in inst.members if r in by_rank]
        for r in ranks:
            joined[r].append(inst)
            neighbours[r].update(x for x in ranks if x != r)

    order = [reference]
    seen = {reference}
    queue = deque([reference])
    while queue:
        r = queue.popleft()
        for n in sorted(neighbours[r]):
            if n not in seen:
                seen.add(n)
                order.append(n)
                queue.append(n)

    maps: dict[int, ClockMap] = {}
    # unrounded aligned ends; rounding once on output keeps quantisation from compounding per hop
    exact_end: dict[int, np.ndarray] = {}
    centre, drift = _drift_model(collectives, reference, order)

    def settle(rank: int, cmap: ClockMap) -> None:
        evs = by_rank[rank].events
        maps[rank] = cmap
        durs = np.array([ev.duration_us for ev in evs], dtype=float)
        exact_end[rank] = _exact_starts(evs, cmap) + durs if evs else durs

    first = by_rank[reference].events
    settle(reference, ClockMap(reference, ((first[0].start_ts_us, 0.0),) if first else ()))

    for rank in order[1:]:
        points: dict[int, float] = {}
        for inst in joined[rank]:
            done = [m for m in inst.members if m != rank and m in maps]
            if not done:
                continue
            local_end = inst.members[rank].event.end_ts_us
            # first anchor wins on identical local ends (only possible for zero-gap collectives)
            if local_end in points:
                continue
            points[local_end] = max(float(exact_end[m][inst.members[m].index]) for m in done) - local_end
        settle(rank, ClockMap(rank, _fit_offsets(points, drift.get(rank), centre)))

    unaligned = sorted(r for r in by_rank if r not in maps)
    for r in unaligned:
        logger.warning("rank %d shares no collective with reference %d; left on local clock", r, reference)
        maps[r] = ClockMap(r)

    aligned_end = {
        r: [s + ev.duration_us for s, ev in zip(aligned_starts(by_rank[r].events, maps[r]), by_rank[r].events)]
        for r in exact_end
    }
    residual: dict[int, int] = defaultdict(int)
    for inst in collectives:
        members = [m for m in inst.members if m in aligned_end]
        if len(members) < 2 or any(m in unaligned for m in members):
            continue
        ends = {m: aligned_end[m][inst.members[m].index] for m in members}
        top = max(ends.values())
        for m, e in ends.items():
            residual[m] = max(residual[m], top - e)

    report = AlignmentReport(reference=reference, unaligned_ranks=unaligned)
    for r in sorted(by_rank):
        anchors = 0 if r == reference else len(maps[r].segments)
        report.per_rank[r] = (anchors, residual[r])
    return [maps[r] for r in sorted(maps)], report


def apply_alignment(
    doc: ChromeTraceDoc, maps: Iterable[ClockMap], report: AlignmentReport | None = None
) -> ChromeTraceDoc:
    """Rewrite every event's ``ts`` through its rank's clock map (``dur`` untouched)."""
    by_rank = {m.rank: m for m in maps}
    traces = {t.rank: t for t in doc_to_traces(doc)}
    new_starts = {
        rank: aligned_starts(trace.events, by_rank[rank]) for rank, trace in traces.items() if rank in by_rank
    }
    events = []
    for ce, (rank, pos) in zip(doc.events, rank_sequence_index(doc)):
        if rank in new_starts:
            ts = new_starts[rank][pos]
            if ts != ce.ts:
                ce = ChromeEvent(ce.name, ce.cat, ce.ph, ts, ce.dur, ce.pid, ce.tid, ce.args)
        events.append(ce)
    events.sort(key=merge_sort_key)
    metadata = dict(doc.metadata)
    if report is not None:
        metadata["alignment"] = {"reference": report.reference, "unaligned_ranks": list(report.unaligned_ranks)}
    return ChromeTraceDoc(tuple(events), metadata)


def anchor_gaps(cmap: ClockMap, events: Sequence[TraceEvent]) -> int:
    """Largest local-time stretch on a rank not bracketed by consecutive anchors.

    Includes the stretch from the first event to the first anchor and from the
    last anchor to the last event end, where the offset is extrapolated.
    """
    if not events or not cmap.segments:
        return 0
    ts = [s[0] for s in cmap.segments]
    lo = min(ev.start_ts_us for ev in events)
    hi = max(ev.end_ts_us for ev in events)
    gaps = [max(0, ts[0] - lo), max(0, hi - ts[-1])]
    gaps.extend(b - a for a, b in zip(ts, ts[1:]))
    return int(max(gaps))


def aligned_traces(traces: Sequence[RankTrace], maps: Iterable[ClockMap]) -> list[RankTrace]:
    """Per-rank traces with start timestamps rewritten through ``maps`` (durations kept)."""
    by_rank = {m.rank: m for m in maps}
    out = []
    for trace in traces:
        cmap = by_rank.get(trace.rank)
        if cmap is None:
            out.append(trace)
            continue
        starts = aligned_starts(trace.events, cmap)
        out.append(RankTrace(trace.rank, tuple(replace(ev, start_ts_us=s) for ev, s in zip(trace.events, starts))))
    return out
