"""Cross-rank matching of communication events into logical instances.

Collectives are matched per ``(op, participant group)``: the k-th such call on
every member rank, in that rank's program order, forms instance k. This
assumes SPMD issue order; a rank that issued more or fewer calls than its
peers leaves unmatched events behind rather than being re-paired
heuristically. Point-to-point transfers carry no tag, so the k-th Send from
``a`` to ``b`` pairs with the k-th Recv on ``b`` from ``a`` (FIFO per directed
pair). When events carry a ``phase``, activations and gradients form separate
FIFO streams: with interleaved chunks both can flow over the same pair and
their relative order differs between sender and receiver.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, NamedTuple, Sequence

from .errors import IntegrityError
from .model import EventKind, RankTrace, TraceEvent, meta_problems, traces_by_rank
from .trace_io import ChromeEvent, ChromeTraceDoc, doc_to_traces, rank_sequence_index


class EventRef(NamedTuple):
    """Position of an event in its rank's canonical event sequence."""

    rank: int
    index: int
    event: TraceEvent


@dataclass(frozen=True)
class CommInstance:
    instance_id: str
    kind: EventKind
    group: tuple[int, ...]
    occurrence_index: int
    members: Mapping[int, EventRef]

    @property
    def is_p2p(self) -> bool:
        return self.kind.is_p2p

    def refs(self) -> list[EventRef]:
        return [self.members[r] for r in sorted(self.members)]


@dataclass(frozen=True)
class Unmatched:
    ref: EventRef
    reason: str

    def to_json(self) -> dict[str, Any]:
        ev = self.ref.event
        return {
            "rank": self.ref.rank,
            "index": self.ref.index,
            "name": ev.name,
            "cat": ev.kind.value,
            "ts": ev.start_ts_us,
            "reason": self.reason,
        }


@dataclass
class Matching:
    instances: list[CommInstance] = field(default_factory=list)
    unmatched: list[Unmatched] = field(default_factory=list)

    def report(self) -> dict[str, Any]:
        return {
            "instance_count": len(self.instances),
            "unmatched_count": len(self.unmatched),
            "unmatched": [u.to_json() for u in self.unmatched],
        }


def collective_id(kind: EventKind, group: Sequence[int], k: int) -> str:
    return f"{kind.value}:{','.join(map(str, group))}#{k}"


def p2p_id(src: int, dst: int, k: int, stream: str | None = None) -> str:
    tag = f":{stream}" if stream else ""
    return f"p2p:{src}->{dst}{tag}#{k}"


def _instance_order(inst: CommInstance) -> tuple:
    return (inst.kind.is_p2p, inst.kind.value, inst.group, inst.occurrence_index)


def match_collectives(traces: Sequence[RankTrace]) -> Matching:
    by_rank = traces_by_rank(traces)
    calls: dict[tuple[EventKind, tuple[int, ...]], dict[int, list[EventRef]]] = defaultdict(lambda: defaultdict(list))
    unmatched: list[Unmatched] = []

    for rank, trace in sorted(by_rank.items()):
        for i, ev in enumerate(trace.events):
            if not ev.kind.is_collective:
                continue
            ref = EventRef(rank, i, ev)
            problems = meta_problems(ev)
            if problems:
                unmatched.append(Unmatched(ref, "; ".join(problems)))
                continue
            calls[(ev.kind, ev.meta.participant_ranks)][rank].append(ref)

    instances = []
    for (kind, group), per_rank in calls.items():
        counts = {r: len(per_rank.get(r, ())) for r in group}
        n = min(counts.values())
        for k in range(n):
            members = {r: per_rank[r][k] for r in group}
            instances.append(CommInstance(collective_id(kind, group, k), kind, group, k, members))
        if len(set(counts.values())) > 1:
            for r, refs in per_rank.items():
                for ref in refs[n:]:
                    unmatched.append(
                        Unmatched(ref, f"occurrence count mismatch in group {list(group)}: {counts}")
                    )
    instances.sort(key=_instance_order)
    unmatched.sort(key=lambda u: (u.ref.rank, u.ref.index))
    return Matching(instances, unmatched)


def match_p2p(traces: Sequence[RankTrace]) -> Matching:
    """Pair Sends with Recvs FIFO per directed rank pair.

    Raises:
        IntegrityError: a matched pair disagrees on ``payload_bytes``.
    """
    by_rank = traces_by_rank(traces)
    sends: dict[tuple[int, int, str], list[EventRef]] = defaultdict(list)
    recvs: dict[tuple[int, int, str], list[EventRef]] = defaultdict(list)
    unmatched: list[Unmatched] = []

    for rank, trace in sorted(by_rank.items()):
        for i, ev in enumerate(trace.events):
            if not ev.kind.is_p2p:
                continue
            ref = EventRef(rank, i, ev)
            problems = meta_problems(ev)
            if problems:
                unmatched.append(Unmatched(ref, "; ".join(problems)))
                continue
            stream = ev.meta.phase.value if ev.meta.phase is not None else ""
            if ev.meta.peer_rank == rank:
                unmatched.append(Unmatched(ref, "p2p event addressed to its own rank"))
            elif ev.kind is EventKind.SEND:
                sends[(rank, ev.meta.peer_rank, stream)].append(ref)
            else:
                recvs[(ev.meta.peer_rank, rank, stream)].append(ref)

    instances = []
    for key in sorted(set(sends) | set(recvs)):
        src, dst, stream = key
        s_list, r_list = sends.get(key, []), recvs.get(key, [])
        n = min(len(s_list), len(r_list))
        for k in range(n):
            s, r = s_list[k], r_list[k]
            if s.event.meta.payload_bytes != r.event.meta.payload_bytes:
                raise IntegrityError(
                    f"payload mismatch on {src}->{dst} occurrence {k}: "
                    f"send {s.event.name!r}@{s.event.start_ts_us} carries {s.event.meta.payload_bytes} B, "
                    f"recv {r.event.name!r}@{r.event.start_ts_us} carries {r.event.meta.payload_bytes} B"
                )
            iid = p2p_id(src, dst, k, stream)
            instances.append(CommInstance(iid, EventKind.SEND, (src, dst), k, {src: s, dst: r}))
        for ref in s_list[n:]:
            unmatched.append(Unmatched(ref, f"send {src}->{dst} without matching recv"))
        for ref in r_list[n:]:
            unmatched.append(Unmatched(ref, f"recv {dst}<-{src} without matching send"))
    unmatched.sort(key=lambda u: (u.ref.rank, u.ref.index))
    return Matching(instances, unmatched)


def reconstruct(traces: Sequence[RankTrace]) -> Matching:
    """Run collective and P2P matching and combine the results."""
    coll = match_collectives(traces)
    p2p = match_p2p(traces)
    unmatched = sorted(coll.unmatched + p2p.unmatched, key=lambda u: (u.ref.rank, u.ref.index))
    return Matching(coll.instances + p2p.instances, unmatched)


def p2p_endpoints(inst: CommInstance) -> tuple[EventRef, EventRef]:
    """Return ``(send_ref, recv_ref)`` of a P2P instance."""
    src, dst = inst.group
    send = inst.members[src]
    recv = inst.members[dst]
    return send, recv


def annotate(doc: ChromeTraceDoc, instances: Iterable[CommInstance]) -> ChromeTraceDoc:
    """Write each member event's instance id into ``args.sync_instance_id``."""
    ids: dict[tuple[int, int], str] = {}
    for inst in instances:
        for ref in inst.members.values():
            ids[(ref.rank, ref.index)] = inst.instance_id
    if not ids:
        return doc
    positions = rank_sequence_index(doc)
    events = []
    for ce, pos in zip(doc.events, positions):
        iid = ids.get(pos)
        if iid is not None:
            args = dict(ce.args)
            args["sync_instance_id"] = iid
            ce = ChromeEvent(ce.name, ce.cat, ce.ph, ce.ts, ce.dur, ce.pid, ce.tid, args)
        events.append(ce)
    return ChromeTraceDoc(tuple(events), doc.metadata)


def instances_from_doc(doc: ChromeTraceDoc) -> list[CommInstance]:
    """Rebuild instances from ``sync_instance_id`` annotations."""
    return instances_from_traces(doc_to_traces(doc))


def instances_from_traces(traces: Sequence[RankTrace]) -> list[CommInstance]:
    grouped: dict[str, dict[int, EventRef]] = defaultdict(dict)
    for trace in traces:
        for i, ev in enumerate(trace.events):
            iid = ev.meta.sync_instance_id
            if iid is None:
                continue
            grouped[iid][trace.rank] = EventRef(trace.rank, i, ev)
    out = []
    for iid, members in grouped.items():
        k = int(iid.rsplit("#", 1)[1]) if "#" in iid else 0
        if iid.startswith("p2p:"):
            pair = iid[4:].split("#")[0].split(":")[0]
            src, dst = (int(x) for x in pair.split("->"))
            out.append(CommInstance(iid, EventKind.SEND, (src, dst), k, members))
        else:
            first = next(iter(members.values())).event
            group = first.meta.participant_ranks or tuple(sorted(members))
            out.append(CommInstance(iid, first.kind, tuple(group), k, members))
    out.sort(key=_instance_order)
    return out


def instance_partition(instances: Iterable[CommInstance]) -> set[frozenset[tuple[int, int]]]:
    """Instances as a set of member-position sets (for comparison with ground truth)."""
    return {frozenset((ref.rank, ref.index) for ref in inst.members.values()) for inst in instances}
