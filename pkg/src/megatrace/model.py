"""Ranks, 3-D parallel topology, and the trace event data model.

Rank layout: the tensor-parallel index varies fastest, then data-parallel,
then pipeline-parallel::

    rank = tp_index + tp_size * (dp_index + dp_size * pp_index)

so TP groups are contiguous ranks, as in Megatron-LM's default grouping.
Timestamps are integer microseconds on the owning rank's local clock.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, NamedTuple, Optional, Sequence

from .errors import TopologyError


class ParallelCoords(NamedTuple):
    tp_index: int
    pp_index: int
    dp_index: int


@dataclass(frozen=True)
class ParallelTopology:
    tp_size: int = 1
    pp_size: int = 1
    dp_size: int = 1

    def __post_init__(self) -> None:
        for name in ("tp_size", "pp_size", "dp_size"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise TopologyError(f"{name} must be a positive integer, got {value!r}")

    @property
    def world_size(self) -> int:
        return self.tp_size * self.pp_size * self.dp_size

    @classmethod
    def parse(cls, text: str) -> "ParallelTopology":
        """Parse ``"tp=2,pp=2,dp=2"`` (missing keys default to 1)."""
        sizes = {"tp": 1, "pp": 1, "dp": 1}
        for part in filter(None, (p.strip() for p in text.split(","))):
            key, sep, value = part.partition("=")
            key = key.strip().lower()
            if not sep or key not in sizes:
                raise TopologyError(f"cannot parse topology component {part!r}")
            try:
                sizes[key] = int(value)
            except ValueError:
                raise TopologyError(f"non-integer size in {part!r}") from None
        return cls(tp_size=sizes["tp"], pp_size=sizes["pp"], dp_size=sizes["dp"])

    def __str__(self) -> str:
        return f"tp={self.tp_size},pp={self.pp_size},dp={self.dp_size}"

    # Group helpers used by the simulator and the detector.

    def tp_group(self, rank: int) -> list[int]:
        c = rank_to_coords(rank, self)
        return [coords_to_rank(ParallelCoords(t, c.pp_index, c.dp_index), self) for t in range(self.tp_size)]

    def pp_group(self, rank: int) -> list[int]:
        c = rank_to_coords(rank, self)
        return [coords_to_rank(ParallelCoords(c.tp_index, p, c.dp_index), self) for p in range(self.pp_size)]

    def model_parallel_group(self, rank: int) -> list[int]:
        """All ranks holding a piece of the same model replica (same dp index)."""
        dp = rank_to_coords(rank, self).dp_index
        return sorted(
            coords_to_rank(ParallelCoords(t, p, dp), self)
            for p in range(self.pp_size)
            for t in range(self.tp_size)
        )


def _check_rank(rank: int, topo: ParallelTopology) -> None:
    if not isinstance(rank, int) or not 0 <= rank < topo.world_size:
        raise TopologyError(f"rank {rank!r} outside [0, {topo.world_size}) for {topo}")


def rank_to_coords(rank: int, topo: ParallelTopology) -> ParallelCoords:
    _check_rank(rank, topo)
    tp = rank % topo.tp_size
    dp = (rank // topo.tp_size) % topo.dp_size
    pp = rank // (topo.tp_size * topo.dp_size)
    return ParallelCoords(tp, pp, dp)


def coords_to_rank(coords: ParallelCoords, topo: ParallelTopology) -> int:
    tp, pp, dp = coords
    for name, value, bound in (("tp_index", tp, topo.tp_size), ("pp_index", pp, topo.pp_size), ("dp_index", dp, topo.dp_size)):
        if not 0 <= value < bound:
            raise TopologyError(f"{name}={value} outside [0, {bound}) for {topo}")
    return tp + topo.tp_size * (dp + topo.dp_size * pp)


def dp_peers(rank: int, topo: ParallelTopology) -> list[int]:
    """Ranks sharing ``rank``'s (tp, pp) indices, including ``rank`` itself."""
    c = rank_to_coords(rank, topo)
    return [coords_to_rank(ParallelCoords(c.tp_index, c.pp_index, d), topo) for d in range(topo.dp_size)]


class EventKind(str, enum.Enum):
    COMPUTE = "compute"
    ALL_REDUCE = "allreduce"
    ALL_GATHER = "allgather"
    REDUCE_SCATTER = "reducescatter"
    BROADCAST = "broadcast"
    SEND = "send"
    RECV = "recv"

    @property
    def is_collective(self) -> bool:
        return self in _COLLECTIVES

    @property
    def is_p2p(self) -> bool:
        return self in (EventKind.SEND, EventKind.RECV)


_COLLECTIVES = frozenset(
    {EventKind.ALL_REDUCE, EventKind.ALL_GATHER, EventKind.REDUCE_SCATTER, EventKind.BROADCAST}
)


class Phase(str, enum.Enum):
    FORWARD = "forward"
    BACKWARD = "backward"
    WARMUP = "warmup"
    STEADY_STATE = "steady_state"


@dataclass(frozen=True)
class EventMeta:
    """Optional per-event metadata.

    Every field is optional so that messy real-world traces still parse; the
    per-kind requirements (collectives carry ``participant_ranks``, P2P events
    carry ``peer_rank`` and ``payload_bytes``) are checked by :func:`meta_problems`
    at analysis time. Unrecognised ``args`` keys live in ``extra``.
    """

    microbatch_id: Optional[int] = None
    chunk_id: Optional[int] = None
    payload_bytes: Optional[int] = None
    participant_ranks: Optional[tuple[int, ...]] = None
    peer_rank: Optional[int] = None
    phase: Optional[Phase] = None
    sync_instance_id: Optional[str] = None
    extra: Mapping[str, Any] = field(default_factory=dict)

    def replace(self, **changes: Any) -> "EventMeta":
        values = {f: getattr(self, f) for f in self.__dataclass_fields__}
        values.update(changes)
        return EventMeta(**values)


@dataclass(frozen=True)
class TraceEvent:
    name: str
    kind: EventKind
    rank: int
    start_ts_us: int
    duration_us: int
    meta: EventMeta = field(default_factory=EventMeta)

    def __post_init__(self) -> None:
        if self.duration_us < 0:
            raise ValueError(f"negative duration for event {self.name!r}")

    @property
    def end_ts_us(self) -> int:
        return self.start_ts_us + self.duration_us


def event_sort_key(event: TraceEvent) -> tuple[int, str]:
    return (event.start_ts_us, event.name)


@dataclass(frozen=True)
class RankTrace:
    """One rank's events in canonical order: by start time, ties broken by name."""

    rank: int
    events: tuple[TraceEvent, ...] = ()

    def __post_init__(self) -> None:
        for ev in self.events:
            if ev.rank != self.rank:
                raise ValueError(f"event {ev.name!r} has rank {ev.rank}, trace is rank {self.rank}")
        object.__setattr__(self, "events", tuple(sorted(self.events, key=event_sort_key)))

    @classmethod
    def from_events(cls, rank: int, events: Iterable[TraceEvent]) -> "RankTrace":
        return cls(rank, tuple(events))

    def __len__(self) -> int:
        return len(self.events)


def meta_problems(event: TraceEvent) -> list[str]:
    """Return the per-kind metadata invariants that ``event`` violates."""
    problems = []
    meta = event.meta
    if event.kind.is_collective:
        if not meta.participant_ranks:
            problems.append("collective without participant_ranks")
        elif event.rank not in meta.participant_ranks:
            problems.append("participant_ranks does not contain the owning rank")
    elif event.kind.is_p2p:
        if meta.peer_rank is None:
            problems.append("p2p event without peer_rank")
        if meta.payload_bytes is None:
            problems.append("p2p event without payload_bytes")
    return problems


def traces_by_rank(traces: Sequence[RankTrace]) -> dict[int, RankTrace]:
    out: dict[int, RankTrace] = {}
    for t in traces:
        if t.rank in out:
            raise ValueError(f"duplicate trace for rank {t.rank}")
        out[t.rank] = t
    return out
