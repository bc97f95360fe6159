"""Deterministic discrete-event simulator of 3-D-parallel training.

Execution model, on an integer true clock in microseconds:

* A TP group (the ``tp_size`` ranks of one pipeline stage in one DP replica)
  runs its pipeline tasks jointly. A task is ``layers_per_chunk`` rounds of a
  compute kernel followed, when ``tp_size > 1``, by a TP all-reduce.
* Forward task ``(mb, chunk)`` on a stage waits for the activation from the
  previous virtual stage; backward waits for the gradient from the next one.
  Sends are asynchronous: a send starts when its producer task ends and lasts
  the link latency ``ceil(payload / effective_bw) + overhead``. A receive is
  posted when its consumer task is committed and ends at
  ``max(post, arrival)``. Under the dynamic DFC/BFC policies the channel
  keeps one receive posted per stream instead, so receives complete in
  arrival order while compute consumes them in policy order.
* After the last backward of a chunk each rank joins a blocking DP gradient
  all-reduce for that chunk. Each iteration ends with a gradient-norm
  all-reduce across the whole model-parallel group, which also ties
  pipeline stages together with a collective.
* Collectives complete at ``max(member arrivals) + duration``.

Compute durations carry multiplicative uniform jitter seeded from
``(seed, rank, compute index)`` so that a local fault only perturbs local
draws. Local clocks are ``t + offset + round(drift_ppm * 1e-6 * t)``.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
import random
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

from .dpp import (
    BACKWARD,
    FORWARD,
    PolicyKind,
    SchedulePolicy,
    TaskId,
    TaskMatrix,
    TaskPicker,
    min_feasible_cap,
    one_f_one_b_order,
    parse_policy,
)
from .errors import InfeasibleScheduleError
from .model import (
    EventKind,
    EventMeta,
    ParallelCoords,
    ParallelTopology,
    Phase,
    RankTrace,
    TraceEvent,
    coords_to_rank,
    dp_peers,
    event_sort_key,
)

logger = logging.getLogger(__name__)

ONE_F_ONE_B = "1f1b"

TP_ALLREDUCE = "tp_allreduce"
DP_ALLREDUCE = "dp_grad_allreduce"
MP_ALLREDUCE = "mp_gradnorm_allreduce"


# --------------------------------------------------------------------------- #
# Faults
# --------------------------------------------------------------------------- #


def _check_window(window: tuple[float, float]) -> None:
    t0, t1 = window
    if not 0 <= t0 < t1:
        raise ValueError(f"fault window must satisfy 0 <= t0 < t1, got {window}")


@dataclass(frozen=True)
class Downclock:
    """Compute on ``rank`` runs ``factor`` times slower while the kernel starts in ``window``.

    Windows are measured from the simulation start (``SimConfig.start_us``).
    """

    rank: int
    factor: float
    window: tuple[float, float] = (0, math.inf)
    kind = "downclock"

    def __post_init__(self) -> None:
        if self.factor < 1:
            raise ValueError(f"downclock factor must be >= 1, got {self.factor}")
        _check_window(self.window)

    def active(self, t: float) -> bool:
        return self.window[0] <= t < self.window[1]


@dataclass(frozen=True)
class LinkDegrade:
    """Scale ``rank``'s egress or ingress P2P bandwidth by ``bw_factor``."""

    rank: int
    direction: str
    bw_factor: float
    window: tuple[float, float] = (0, math.inf)
    kind = "link_degrade"

    def __post_init__(self) -> None:
        if self.direction not in ("egress", "ingress"):
            raise ValueError(f"direction must be egress or ingress, got {self.direction!r}")
        if not 0 < self.bw_factor < 1:
            raise ValueError(f"bw_factor must be in (0, 1), got {self.bw_factor}")
        _check_window(self.window)

    def active(self, t: float) -> bool:
        return self.window[0] <= t < self.window[1]


@dataclass(frozen=True)
class ClockSkew:
    rank: int
    offset_us: int = 0
    drift_ppm: float = 0.0
    kind = "clock_skew"

    def __post_init__(self) -> None:
        if not -1e6 < self.drift_ppm < 1e6:
            raise ValueError("drift_ppm must keep the clock monotone")


FaultSpec = Union[Downclock, LinkDegrade, ClockSkew]


def fault_to_json(fault: FaultSpec) -> dict[str, Any]:
    out: dict[str, Any] = {"kind": fault.kind, "rank": fault.rank}
    if isinstance(fault, ClockSkew):
        out.update(offset_us=fault.offset_us, drift_ppm=fault.drift_ppm)
        return out
    if isinstance(fault, Downclock):
        out["factor"] = fault.factor
    else:
        out.update(direction=fault.direction, bw_factor=fault.bw_factor)
    t0, t1 = fault.window
    out["window"] = [t0, None if math.isinf(t1) else t1]
    return out


def fault_from_json(obj: Mapping[str, Any]) -> FaultSpec:
    kind = str(obj.get("kind", "")).lower().replace("-", "_")
    window = obj.get("window")
    win = (0, math.inf)
    if window is not None:
        t0, t1 = window
        win = (t0, math.inf if t1 is None else t1)
    if kind == "downclock":
        return Downclock(int(obj["rank"]), float(obj["factor"]), win)
    if kind in ("link_degrade", "linkdegrade"):
        return LinkDegrade(int(obj["rank"]), str(obj["direction"]), float(obj["bw_factor"]), win)
    if kind in ("clock_skew", "clockskew"):
        return ClockSkew(int(obj["rank"]), int(obj.get("offset_us", 0)), float(obj.get("drift_ppm", 0.0)))
    raise ValueError(f"unknown fault kind {obj.get('kind')!r}")


# --------------------------------------------------------------------------- #
# Config and ground truth
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class SimConfig:
    topo: ParallelTopology = field(default_factory=ParallelTopology)
    num_microbatches: int = 8
    num_chunks_per_stage: int = 1
    layers_per_chunk: int = 1
    compute_us_per_task: int = 1000
    backward_ratio: float = 2.0
    tp_collective_us: int = 100
    dp_allreduce_us: int = 1000
    mp_allreduce_us: int = 50
    p2p_payload_bytes: int = 4 * 2**20
    link_bw_bytes_per_us: float = 12_500.0
    p2p_overhead_us: int = 10
    jitter_pct: float = 0.05
    seed: int = 0
    schedule: Union[str, SchedulePolicy] = ONE_F_ONE_B
    num_iterations: int = 1
    # true time of the first kernel; keeps skewed host clocks non-negative
    start_us: int = 1_000_000

    def __post_init__(self) -> None:
        for name in ("compute_us_per_task", "tp_collective_us", "dp_allreduce_us", "mp_allreduce_us"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("num_microbatches", "num_chunks_per_stage", "layers_per_chunk", "num_iterations"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.p2p_payload_bytes <= 0 or self.link_bw_bytes_per_us <= 0 or self.p2p_overhead_us < 0:
            raise ValueError("p2p payload and bandwidth must be positive")
        if self.start_us < 0:
            raise ValueError("start_us must be non-negative")
        if self.backward_ratio <= 0:
            raise ValueError("backward_ratio must be positive")
        if not 0 <= self.jitter_pct < 1:
            raise ValueError("jitter_pct must be in [0, 1)")
        if isinstance(self.schedule, str) and self.schedule != ONE_F_ONE_B:
            raise ValueError(f"unknown schedule {self.schedule!r}")

    @property
    def num_virtual_stages(self) -> int:
        return self.topo.pp_size * self.num_chunks_per_stage

    def to_json(self) -> dict[str, Any]:
        sched = self.schedule
        return {
            "topo": str(self.topo),
            "num_microbatches": self.num_microbatches,
            "num_chunks_per_stage": self.num_chunks_per_stage,
            "layers_per_chunk": self.layers_per_chunk,
            "compute_us_per_task": self.compute_us_per_task,
            "backward_ratio": self.backward_ratio,
            "tp_collective_us": self.tp_collective_us,
            "dp_allreduce_us": self.dp_allreduce_us,
            "mp_allreduce_us": self.mp_allreduce_us,
            "p2p_payload_bytes": self.p2p_payload_bytes,
            "link_bw_bytes_per_us": self.link_bw_bytes_per_us,
            "p2p_overhead_us": self.p2p_overhead_us,
            "jitter_pct": self.jitter_pct,
            "seed": self.seed,
            "schedule": sched if isinstance(sched, str) else sched.kind.value,
            "mem_cap_bytes": None if isinstance(sched, str) else sched.mem_cap_bytes,
            "num_iterations": self.num_iterations,
            "start_us": self.start_us,
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "SimConfig":
        obj = dict(obj)
        topo = obj.pop("topo", None)
        if isinstance(topo, Mapping):
            topo = ParallelTopology(int(topo.get("tp", 1)), int(topo.get("pp", 1)), int(topo.get("dp", 1)))
        elif isinstance(topo, str):
            topo = ParallelTopology.parse(topo)
        else:
            topo = ParallelTopology()
        sched = str(obj.pop("schedule", ONE_F_ONE_B))
        cap = obj.pop("mem_cap_bytes", None)
        schedule: Union[str, SchedulePolicy] = ONE_F_ONE_B if sched == ONE_F_ONE_B else parse_policy(sched, cap)
        known = set(cls.__dataclass_fields__) - {"topo", "schedule"}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown simulation settings: {sorted(unknown)}")
        return cls(topo=topo, schedule=schedule, **obj)


def local_clock(t: int, offset_us: int, drift_ppm: float) -> int:
    return t + offset_us + math.floor(drift_ppm * 1e-6 * t + 0.5)


@dataclass
class GroundTruth:
    """Oracle data for one simulation run, keyed by ``(rank, index)`` in canonical order."""

    injected_faults: list[FaultSpec] = field(default_factory=list)
    true_global_ts: dict[tuple[int, int], int] = field(default_factory=dict)
    true_end_ts: dict[tuple[int, int], int] = field(default_factory=dict)
    true_instances: dict[tuple[int, int], str] = field(default_factory=dict)
    clocks: dict[int, tuple[int, float]] = field(default_factory=dict)

    def local_ts(self, rank: int, t: int) -> int:
        offset, drift = self.clocks.get(rank, (0, 0.0))
        return local_clock(t, offset, drift)

    def instance_partition(self) -> set[frozenset[tuple[int, int]]]:
        groups: dict[str, set[tuple[int, int]]] = defaultdict(set)
        for key, iid in self.true_instances.items():
            groups[iid].add(key)
        return {frozenset(v) for v in groups.values()}

    def to_json(self) -> dict[str, Any]:
        def enc(d: Mapping[tuple[int, int], Any]) -> dict[str, Any]:
            return {f"{r}:{i}": v for (r, i), v in sorted(d.items())}

        return {
            "injected_faults": [fault_to_json(f) for f in self.injected_faults],
            "clocks": {str(r): {"offset_us": o, "drift_ppm": d} for r, (o, d) in sorted(self.clocks.items())},
            "true_global_ts": enc(self.true_global_ts),
            "true_end_ts": enc(self.true_end_ts),
            "true_instances": enc(self.true_instances),
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "GroundTruth":
        def dec(d: Mapping[str, Any]) -> dict[tuple[int, int], Any]:
            out = {}
            for key, v in d.items():
                r, i = key.split(":")
                out[(int(r), int(i))] = v
            return out

        return cls(
            injected_faults=[fault_from_json(f) for f in obj.get("injected_faults", [])],
            true_global_ts=dec(obj.get("true_global_ts", {})),
            true_end_ts=dec(obj.get("true_end_ts", {})),
            true_instances=dec(obj.get("true_instances", {})),
            clocks={int(r): (int(v["offset_us"]), float(v["drift_ppm"])) for r, v in obj.get("clocks", {}).items()},
        )


# --------------------------------------------------------------------------- #
# Event loop
# --------------------------------------------------------------------------- #

_ARRIVE, _FREE = 0, 1


@dataclass
class _Record:
    rank: int
    start: int
    end: int
    name: str
    kind: EventKind
    meta: EventMeta
    instance: Optional[str] = None


@dataclass
class _Unit:
    """One pipeline stage of one DP replica; its TP ranks execute in lockstep."""

    dp: int
    stage: int
    ranks: list[int]
    program: Optional[list[TaskId]] = None
    picker: Optional[TaskPicker] = None
    iteration: int = 0
    pos: int = 0
    remaining: set[TaskId] = field(default_factory=set)
    done: set[TaskId] = field(default_factory=set)
    arrivals: dict[tuple[int, TaskId], dict[int, int]] = field(default_factory=lambda: defaultdict(dict))
    bwd_per_chunk: dict[int, int] = field(default_factory=lambda: defaultdict(int))
    pending_syncs: deque = field(default_factory=deque)
    iteration_synced: bool = False
    waiting: Optional[tuple[TaskId, int]] = None
    idle_since: Optional[int] = None
    iteration_start: int = 0
    last_recv: dict[tuple[int, Phase], int] = field(default_factory=dict)
    finished: bool = False

    @property
    def key(self) -> tuple[int, int]:
        return (self.dp, self.stage)


class _Simulator:
    def __init__(self, cfg: SimConfig, faults: Sequence[FaultSpec]):
        self.cfg = cfg
        self.topo = cfg.topo
        self.faults = list(faults)
        for f in self.faults:
            if not 0 <= f.rank < self.topo.world_size:
                raise ValueError(f"fault targets rank {f.rank} outside the world of {self.topo.world_size}")
        self.downclocks = defaultdict(list)
        self.egress = defaultdict(list)
        self.ingress = defaultdict(list)
        for f in self.faults:
            if isinstance(f, Downclock):
                self.downclocks[f.rank].append(f)
            elif isinstance(f, LinkDegrade):
                (self.egress if f.direction == "egress" else self.ingress)[f.rank].append(f)
        self.records: list[_Record] = []
        self.compute_index: dict[int, int] = defaultdict(int)
        self.heap: list[tuple[int, int, int, int, Any]] = []
        self.seq = itertools.count()
        self.syncs: dict[tuple, dict[tuple[int, int], int]] = {}
        self.units: dict[tuple[int, int], _Unit] = {}
        self.matrix = TaskMatrix.uniform(
            max(cfg.num_chunks_per_stage, 1), max(cfg.num_microbatches, 1),
            activation_bytes=cfg.p2p_payload_bytes,
        )
        policy = cfg.schedule
        if isinstance(policy, SchedulePolicy) and policy.kind is PolicyKind.BEST_EFFORT_BFC:
            if policy.mem_cap_bytes < min_feasible_cap(self.matrix):
                raise InfeasibleScheduleError(
                    f"mem cap {policy.mem_cap_bytes} below one microbatch's activations {min_feasible_cap(self.matrix)}"
                )
        for d in range(self.topo.dp_size):
            for s in range(self.topo.pp_size):
                ranks = [coords_to_rank(ParallelCoords(t, s, d), self.topo) for t in range(self.topo.tp_size)]
                self.units[(d, s)] = _Unit(d, s, ranks)

    # -- helpers -------------------------------------------------------------

    def push(self, t: int, prio: int, payload: Any) -> None:
        heapq.heappush(self.heap, (t, prio, next(self.seq), payload))

    def emit(self, rank: int, start: int, end: int, name: str, kind: EventKind, meta: EventMeta,
             instance: Optional[str] = None) -> None:
        self.records.append(_Record(rank, start, end, name, kind, meta, instance))

    def compute_duration(self, rank: int, start: int, base: float) -> int:
        idx = self.compute_index[rank]
        self.compute_index[rank] += 1
        scale = 1.0
        if self.cfg.jitter_pct > 0:
            u = random.Random(f"{self.cfg.seed}:{rank}:{idx}").random()
            scale += self.cfg.jitter_pct * (2 * u - 1)
        for f in self.downclocks.get(rank, ()):
            if f.active(start - self.cfg.start_us):
                scale *= f.factor
        return max(1, round(base * scale))

    def link_latency(self, src: int, dst: int, t: int) -> int:
        bw = self.cfg.link_bw_bytes_per_us
        for f in self.egress.get(src, ()):
            if f.active(t - self.cfg.start_us):
                bw *= f.bw_factor
        for f in self.ingress.get(dst, ()):
            if f.active(t - self.cfg.start_us):
                bw *= f.bw_factor
        return math.ceil(self.cfg.p2p_payload_bytes / bw) + self.cfg.p2p_overhead_us

    def virtual_stage(self, stage: int, chunk: int) -> int:
        return chunk * self.topo.pp_size + stage

    def locate(self, v: int) -> tuple[int, int]:
        """``(stage, chunk)`` of virtual stage ``v``."""
        return v % self.topo.pp_size, v // self.topo.pp_size

    def producer(self, unit: _Unit, task: TaskId) -> Optional[tuple[int, TaskId]]:
        """Stage and task whose output ``task`` consumes across stages, if any."""
        v = self.virtual_stage(unit.stage, task.chunk_id)
        nv = v - 1 if task.phase is FORWARD else v + 1
        if not 0 <= nv < self.cfg.num_virtual_stages:
            return None
        stage, chunk = self.locate(nv)
        return stage, TaskId(chunk, task.microbatch_id, task.phase)

    def consumer(self, unit: _Unit, task: TaskId) -> Optional[tuple[int, TaskId]]:
        v = self.virtual_stage(unit.stage, task.chunk_id)
        nv = v + 1 if task.phase is FORWARD else v - 1
        if not 0 <= nv < self.cfg.num_virtual_stages:
            return None
        stage, chunk = self.locate(nv)
        return stage, TaskId(chunk, task.microbatch_id, task.phase)

    # -- readiness -----------------------------------------------------------

    def inputs_ready(self, unit: _Unit, task: TaskId) -> bool:
        if task.phase is BACKWARD and TaskId(task.chunk_id, task.microbatch_id, FORWARD) not in unit.done:
            return False
        prod = self.producer(unit, task)
        if prod is None:
            return True
        stage, ptask = prod
        if stage == unit.stage:
            return ptask in unit.done
        return len(unit.arrivals.get((unit.iteration, task), {})) == len(unit.ranks)

    # -- unit progression ----------------------------------------------------

    def start_iteration(self, unit: _Unit, t: int = 0) -> None:
        cfg = self.cfg
        unit.iteration_start = t
        unit.last_recv = {}
        unit.pos = 0
        unit.done = set()
        unit.bwd_per_chunk = defaultdict(int)
        unit.iteration_synced = False
        tasks = [TaskId(c, m, p) for p in (FORWARD, BACKWARD)
                 for c in range(cfg.num_chunks_per_stage) for m in range(cfg.num_microbatches)]
        unit.remaining = set(tasks)
        if cfg.schedule == ONE_F_ONE_B:
            unit.program = (
                one_f_one_b_order(self.topo.pp_size, unit.stage, cfg.num_microbatches, cfg.num_chunks_per_stage)
                if tasks else []
            )
        else:
            unit.picker = TaskPicker(self.matrix, cfg.schedule)

    def advance(self, unit: _Unit, t: int) -> None:
        while True:
            if unit.pending_syncs:
                self.join_sync(unit, unit.pending_syncs.popleft(), t)
                return
            if unit.remaining:
                if unit.program is not None and self.cfg.schedule == ONE_F_ONE_B:
                    task = unit.program[unit.pos]
                    unit.waiting = (task, t)
                    self.try_run_committed(unit)
                else:
                    unit.idle_since = t
                    self.try_pick(unit, t)
                return
            if not unit.iteration_synced:
                unit.iteration_synced = True
                group = self.topo.model_parallel_group(unit.ranks[0])
                if len(group) > 1:
                    self.join_sync(unit, ("mp", unit.iteration, unit.dp), t)
                    return
                continue
            unit.iteration += 1
            if unit.iteration >= self.cfg.num_iterations:
                unit.finished = True
                return
            self.start_iteration(unit, t)

    def try_run_committed(self, unit: _Unit) -> None:
        task, commit = unit.waiting
        if not self.inputs_ready(unit, task):
            return
        unit.waiting = None
        unit.pos += 1
        self.execute(unit, task, commit)

    def try_pick(self, unit: _Unit, t: int) -> None:
        ready = [task for task in unit.remaining if self.inputs_ready(unit, task)]
        task = unit.picker.pick(ready)
        if task is None:
            return
        unit.idle_since = None
        self.execute(unit, task, t)

    def emit_recv(self, unit: _Unit, member: int, task: TaskId, post: int, end: int) -> None:
        src_stage, ptask = self.producer(unit, task)
        rank = unit.ranks[member]
        src = coords_to_rank(ParallelCoords(member, src_stage, unit.dp), self.topo)
        tag = "F" if task.phase is FORWARD else "B"
        name = "recv_forward" if task.phase is FORWARD else "recv_backward"
        meta = EventMeta(microbatch_id=task.microbatch_id, chunk_id=task.chunk_id,
                         payload_bytes=self.cfg.p2p_payload_bytes, peer_rank=src, phase=task.phase,
                         extra={"iteration": unit.iteration})
        iid = f"p2p:{src}->{rank}:it{unit.iteration}:{tag}{task.microbatch_id}:c{ptask.chunk_id}"
        self.emit(rank, post, end, name, EventKind.RECV, meta, iid)

    def on_arrival(self, unit: _Unit, t: int, payload: tuple) -> None:
        _, _, iteration, task, member, arrival = payload
        unit.arrivals[(iteration, task)][member] = arrival
        if unit.picker is not None:
            # the channel keeps one receive posted per stream and reposts on completion
            stream = (member, task.phase)
            post = min(unit.last_recv.get(stream, unit.iteration_start), arrival)
            self.emit_recv(unit, member, task, post, arrival)
            unit.last_recv[stream] = arrival
        if unit.waiting is not None:
            self.try_run_committed(unit)
        elif unit.idle_since is not None and unit.picker is not None and iteration == unit.iteration:
            self.try_pick(unit, t)

    # -- task execution ------------------------------------------------------

    def execute(self, unit: _Unit, task: TaskId, commit: int) -> None:
        cfg = self.cfg
        it = unit.iteration
        unit.remaining.discard(task)
        phase = task.phase
        mb, chunk = task.microbatch_id, task.chunk_id
        extra = {"iteration": it}
        tag = "F" if phase is FORWARD else "B"
        prod = self.producer(unit, task)
        starts = []
        for i, rank in enumerate(unit.ranks):
            start = commit
            if prod is not None and prod[0] != unit.stage:
                arrival = unit.arrivals[(it, task)][i]
                if unit.picker is None:
                    self.emit_recv(unit, i, task, commit, max(commit, arrival))
                start = max(commit, arrival)
            starts.append(start)
        unit.arrivals.pop((it, task), None)

        base = cfg.compute_us_per_task / max(cfg.layers_per_chunk, 1)
        if phase is BACKWARD:
            base *= cfg.backward_ratio
        name = phase.value
        tp_group = tuple(unit.ranks)
        cur = starts
        for layer in range(max(cfg.layers_per_chunk, 1)):
            ends = []
            for i, rank in enumerate(unit.ranks):
                dur = self.compute_duration(rank, cur[i], base)
                meta = EventMeta(microbatch_id=mb, chunk_id=chunk, phase=phase, extra=dict(extra, layer=layer))
                self.emit(rank, cur[i], cur[i] + dur, name, EventKind.COMPUTE, meta)
                ends.append(cur[i] + dur)
            if len(unit.ranks) > 1:
                done = max(ends) + cfg.tp_collective_us
                iid = f"tp:{unit.dp}.{unit.stage}:it{it}:{tag}{mb}:c{chunk}:l{layer}"
                for i, rank in enumerate(unit.ranks):
                    meta = EventMeta(microbatch_id=mb, chunk_id=chunk, phase=phase, participant_ranks=tp_group,
                                     extra=dict(extra, layer=layer))
                    self.emit(rank, ends[i], done, TP_ALLREDUCE, EventKind.ALL_REDUCE, meta, iid)
                ends = [done] * len(unit.ranks)
            cur = ends
        finish = max(cur)

        unit.done.add(task)
        if unit.picker is not None:
            (unit.picker.forward_done if phase is FORWARD else unit.picker.backward_done)(task)

        cons = self.consumer(unit, task)
        if cons is not None and cons[0] != unit.stage:
            dst_stage, ctask = cons
            dst_unit = self.units[(unit.dp, dst_stage)]
            for i, rank in enumerate(unit.ranks):
                dst = dst_unit.ranks[i]
                lat = self.link_latency(rank, dst, finish)
                name = "send_forward" if phase is FORWARD else "send_backward"
                meta = EventMeta(microbatch_id=mb, chunk_id=chunk, payload_bytes=cfg.p2p_payload_bytes,
                                 peer_rank=dst, phase=phase, extra=extra)
                iid = f"p2p:{rank}->{dst}:it{it}:{tag}{mb}:c{chunk}"
                self.emit(rank, finish, finish + lat, name, EventKind.SEND, meta, iid)
                self.push(finish + lat, _ARRIVE, ("arrive", dst_unit.key, it, ctask, i, finish + lat))

        if phase is BACKWARD:
            unit.bwd_per_chunk[chunk] += 1
            if unit.bwd_per_chunk[chunk] == cfg.num_microbatches and self.topo.dp_size > 1:
                unit.pending_syncs.append(("dp", it, unit.stage, chunk))
        self.push(finish, _FREE, ("free", unit.key))

    # -- collectives ---------------------------------------------------------

    def sync_units(self, key: tuple) -> list[tuple[int, int]]:
        if key[0] == "dp":
            return [(d, key[2]) for d in range(self.topo.dp_size)]
        return [(key[2], s) for s in range(self.topo.pp_size)]

    def join_sync(self, unit: _Unit, key: tuple, t: int) -> None:
        arrived = self.syncs.setdefault(key, {})
        arrived[unit.key] = t
        members = self.sync_units(key)
        if len(arrived) < len(members):
            return
        del self.syncs[key]
        kind, it = key[0], key[1]
        dur = self.cfg.dp_allreduce_us if kind == "dp" else self.cfg.mp_allreduce_us
        end = max(arrived.values()) + dur
        for ukey in members:
            u = self.units[ukey]
            for rank in u.ranks:
                if kind == "dp":
                    group = tuple(dp_peers(rank, self.topo))
                    tp_index = rank % self.topo.tp_size
                    iid = f"dp:{key[2]}.{tp_index}:it{it}:c{key[3]}"
                    meta = EventMeta(chunk_id=key[3], participant_ranks=group, extra={"iteration": it})
                    name = DP_ALLREDUCE
                else:
                    group = tuple(self.topo.model_parallel_group(rank))
                    iid = f"mp:{key[2]}:it{it}"
                    meta = EventMeta(participant_ranks=group, extra={"iteration": it})
                    name = MP_ALLREDUCE
                self.emit(rank, arrived[ukey], end, name, EventKind.ALL_REDUCE, meta, iid)
            self.push(end, _FREE, ("free", ukey))

    # -- driver --------------------------------------------------------------

    def run(self) -> list[_Record]:
        if self.cfg.num_iterations == 0 or self.cfg.num_microbatches == 0 or self.cfg.num_chunks_per_stage == 0:
            return []
        for unit in self.units.values():
            self.start_iteration(unit, self.cfg.start_us)
            self.push(self.cfg.start_us, _FREE, ("free", unit.key))
        while self.heap:
            t, _, _, payload = heapq.heappop(self.heap)
            unit = self.units[payload[1]]
            if payload[0] == "arrive":
                self.on_arrival(unit, t, payload)
            else:
                self.advance(unit, t)
        stuck = [u.key for u in self.units.values() if not u.finished]
        if stuck:
            raise RuntimeError(f"simulation stalled with units {stuck} unfinished (dependency cycle)")
        return self.records


def run_sim(cfg: SimConfig, faults: Iterable[FaultSpec] = ()) -> tuple[list[RankTrace], GroundTruth]:
    """Simulate ``cfg`` with ``faults`` injected.

    Returns one :class:`RankTrace` per rank (local clocks) and the
    :class:`GroundTruth` keyed by each event's canonical position.
    """
    faults = list(faults)
    for f in faults:
        if isinstance(f, ClockSkew) and local_clock(cfg.start_us, f.offset_us, f.drift_ppm) < 0:
            raise ValueError(f"clock skew on rank {f.rank} makes timestamps negative; raise start_us")
    records = _Simulator(cfg, faults).run()
    clocks = {r: (0, 0.0) for r in range(cfg.topo.world_size)}
    for f in faults:
        if isinstance(f, ClockSkew):
            off, drift = clocks[f.rank]
            clocks[f.rank] = (off + f.offset_us, drift + f.drift_ppm)

    per_rank: dict[int, list[tuple[TraceEvent, _Record]]] = {r: [] for r in range(cfg.topo.world_size)}
    for rec in records:
        off, drift = clocks[rec.rank]
        start = local_clock(rec.start, off, drift)
        end = local_clock(rec.end, off, drift)
        ev = TraceEvent(rec.name, rec.kind, rec.rank, start, end - start, rec.meta)
        per_rank[rec.rank].append((ev, rec))

    gt = GroundTruth(injected_faults=faults, clocks=clocks)
    traces = []
    for rank in sorted(per_rank):
        pairs = sorted(per_rank[rank], key=lambda p: event_sort_key(p[0]))
        for i, (_, rec) in enumerate(pairs):
            gt.true_global_ts[(rank, i)] = rec.start
            gt.true_end_ts[(rank, i)] = rec.end
            if rec.instance is not None:
                gt.true_instances[(rank, i)] = rec.instance
        traces.append(RankTrace(rank, tuple(ev for ev, _ in pairs)))
    logger.debug("simulated %d events over %d ranks", len(records), len(traces))
    return traces, gt
