"""Task-matrix pipeline scheduling: depth-first, breadth-first, best-effort BFC.

One training iteration on a pipeline rank is a ``chunks x microbatches``
matrix of forward tasks plus the mirrored backward tasks. A schedule is a
traversal order over that matrix:

* DFC (depth-first) advances one microbatch through every chunk before the
  next microbatch, so its backward can start early and activations are
  released early.
* BFC (breadth-first) runs every microbatch through one chunk before moving
  to the next chunk, so whole chunks finish their backward early and can
  start gradient synchronisation sooner.
* Best-effort BFC follows BFC priority but never admits a forward task that
  would overflow the activation-memory cap or leave in-flight microbatches
  unable to finish within it.

The scheduler is list-scheduling over this priority: at every decision point
the compute thread runs the highest-priority task whose inputs are present.
Cross-rank transfers go through :class:`Channel`, an asynchronous P2P model
with four buffers and separate send/receive queues.
"""

from __future__ import annotations

import enum
import heapq
import itertools
import math
import re
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Hashable, Iterable, Mapping, NamedTuple, Optional

from .errors import BackpressureError, InfeasibleScheduleError
from .model import Phase

FORWARD = Phase.FORWARD
BACKWARD = Phase.BACKWARD


class TaskId(NamedTuple):
    chunk_id: int
    microbatch_id: int
    phase: Phase = Phase.FORWARD

    def __str__(self) -> str:
        tag = "F" if self.phase is Phase.FORWARD else "B"
        return f"{tag}{self.microbatch_id}-{self.chunk_id}"


@dataclass
class TaskMatrix:
    C: int
    M: int
    durations: dict[TaskId, float] = field(default_factory=dict)
    activation_bytes: dict[tuple[int, int], int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.C < 1 or self.M < 1:
            raise ValueError("a task matrix needs at least one chunk and one microbatch")
        for t, d in self.durations.items():
            if d <= 0:
                raise ValueError(f"non-positive duration for {t}")

    @classmethod
    def uniform(
        cls, C: int, M: int, forward_us: float = 1.0, backward_us: float = 2.0, activation_bytes: int = 1
    ) -> "TaskMatrix":
        durations = {}
        for c in range(C):
            for m in range(M):
                durations[TaskId(c, m, FORWARD)] = forward_us
                durations[TaskId(c, m, BACKWARD)] = backward_us
        acts = {(c, m): activation_bytes for c in range(C) for m in range(M)}
        return cls(C, M, durations, acts)

    def duration(self, task: TaskId) -> float:
        return self.durations.get(task, 1.0 if task.phase is FORWARD else 2.0)

    def activation(self, chunk: int, mb: int) -> int:
        return self.activation_bytes.get((chunk, mb), 1)

    def tasks(self, phase: Phase) -> list[TaskId]:
        return [TaskId(c, m, phase) for c in range(self.C) for m in range(self.M)]


class PolicyKind(str, enum.Enum):
    DFC = "dfc"
    BFC = "bfc"
    BEST_EFFORT_BFC = "best-effort-bfc"


@dataclass(frozen=True)
class SchedulePolicy:
    kind: PolicyKind
    mem_cap_bytes: Optional[int] = None

    def __post_init__(self) -> None:
        if self.kind is PolicyKind.BEST_EFFORT_BFC:
            if self.mem_cap_bytes is None or self.mem_cap_bytes <= 0:
                raise ValueError("best-effort BFC needs a positive mem_cap_bytes")

    @property
    def breadth_first(self) -> bool:
        return self.kind is not PolicyKind.DFC

    def __str__(self) -> str:
        if self.kind is PolicyKind.BEST_EFFORT_BFC:
            return f"{self.kind.value}(cap={self.mem_cap_bytes})"
        return self.kind.value


DFC = SchedulePolicy(PolicyKind.DFC)
BFC = SchedulePolicy(PolicyKind.BFC)


def best_effort_bfc(mem_cap_bytes: int) -> SchedulePolicy:
    return SchedulePolicy(PolicyKind.BEST_EFFORT_BFC, int(mem_cap_bytes))


def traversal_order(matrix: TaskMatrix, policy: SchedulePolicy, phase: Phase = FORWARD) -> list[TaskId]:
    """Traversal of one phase of the matrix.

    Depth-first is microbatch-major, breadth-first is chunk-major. Backward
    traversals visit chunks last-to-first, the direction gradients flow.
    """
    chunks = list(range(matrix.C))
    if phase is BACKWARD:
        chunks.reverse()
    if policy.breadth_first:
        return [TaskId(c, m, phase) for c in chunks for m in range(matrix.M)]
    return [TaskId(c, m, phase) for m in range(matrix.M) for c in chunks]


def priority_order(matrix: TaskMatrix, policy: SchedulePolicy) -> list[TaskId]:
    """Combined forward/backward priority used by the list scheduler.

    DFC: each microbatch's forwards then its backwards, microbatch by
    microbatch. BFC: all forwards in BFC order, then all backwards.
    """
    if policy.breadth_first:
        return traversal_order(matrix, policy, FORWARD) + traversal_order(matrix, policy, BACKWARD)
    out = []
    for m in range(matrix.M):
        out.extend(TaskId(c, m, FORWARD) for c in range(matrix.C))
        out.extend(TaskId(c, m, BACKWARD) for c in reversed(range(matrix.C)))
    return out


def one_f_one_b_order(pp: int, stage: int, M: int, C: int = 1) -> list[TaskId]:
    """Static 1F1B order for one pipeline stage (interleaved when ``C > 1``).

    Follows Megatron-LM: ``pp - stage - 1`` warm-up forwards (plus
    ``(C - 1) * pp`` more and doubled per-stage skew when interleaved), then
    alternating forward/backward, then the cool-down backwards.
    """
    if not 0 <= stage < pp:
        raise ValueError(f"stage {stage} outside [0, {pp})")
    if C == 1:
        warm = min(pp - stage - 1, M)
        order = [TaskId(0, m, FORWARD) for m in range(warm)]
        for i in range(M - warm):
            order.append(TaskId(0, warm + i, FORWARD))
            order.append(TaskId(0, i, BACKWARD))
        order.extend(TaskId(0, m, BACKWARD) for m in range(M - warm, M))
        return order

    if M % pp:
        raise ValueError("interleaved 1F1B needs the microbatch count to be a multiple of the pipeline size")
    total = M * C
    group = pp * C

    def fwd(k: int) -> TaskId:
        return TaskId((k % group) // pp, (k // group) * pp + k % pp, FORWARD)

    def bwd(k: int) -> TaskId:
        return TaskId(C - 1 - (k % group) // pp, (k // group) * pp + k % pp, BACKWARD)

    warm = min((pp - stage - 1) * 2 + (C - 1) * pp, total)
    order = [fwd(k) for k in range(warm)]
    for i in range(total - warm):
        order.append(fwd(warm + i))
        order.append(bwd(i))
    order.extend(bwd(k) for k in range(total - warm, total))
    return order


# --------------------------------------------------------------------------- #
# Memory-aware task selection
# --------------------------------------------------------------------------- #


class TaskPicker:
    """Policy-ordered selection of the next ready task, with activation accounting.

    Activation memory for ``(chunk, mb)`` is charged when its forward
    completes and released when its backward completes. Under best-effort
    BFC a forward is admitted only if the cap still holds and every
    in-flight microbatch can still be driven to completion one at a time
    (a banker's-algorithm check), which is what keeps ``cap == DFC peak``
    feasible.
    """

    def __init__(self, matrix: TaskMatrix, policy: SchedulePolicy):
        self.matrix = matrix
        self.policy = policy
        self.order = priority_order(matrix, policy)
        self.rank = {t: i for i, t in enumerate(self.order)}
        self.mem = 0
        self.peak = 0
        self._allocated: dict[int, int] = {}
        self._pending_fwd: dict[int, set[int]] = {m: set(range(matrix.C)) for m in range(matrix.M)}

    @property
    def cap(self) -> float:
        if self.policy.kind is PolicyKind.BEST_EFFORT_BFC:
            return float(self.policy.mem_cap_bytes)
        return math.inf

    def _admissible(self, task: TaskId) -> bool:
        if task.phase is BACKWARD or self.policy.kind is not PolicyKind.BEST_EFFORT_BFC:
            return True
        act = self.matrix.activation(task.chunk_id, task.microbatch_id)
        avail = self.cap - self.mem - act
        if avail < 0:
            return False
        needs = []
        for m, pending in self._pending_fwd.items():
            pend = pending - {task.chunk_id} if m == task.microbatch_id else pending
            held = self._allocated.get(m, 0) + (act if m == task.microbatch_id else 0)
            if held == 0:
                continue
            need = sum(self.matrix.activation(c, m) for c in pend)
            needs.append((need, held))
        for need, held in sorted(needs):
            if need > avail:
                return False
            avail += held
        return True

    def pick(self, ready: Iterable[TaskId]) -> Optional[TaskId]:
        for task in sorted(ready, key=self.rank.__getitem__):
            if self._admissible(task):
                return task
        return None

    def forward_done(self, task: TaskId) -> None:
        act = self.matrix.activation(task.chunk_id, task.microbatch_id)
        self.mem += act
        self.peak = max(self.peak, self.mem)
        self._allocated[task.microbatch_id] = self._allocated.get(task.microbatch_id, 0) + act
        self._pending_fwd[task.microbatch_id].discard(task.chunk_id)

    def backward_done(self, task: TaskId) -> None:
        act = self.matrix.activation(task.chunk_id, task.microbatch_id)
        self.mem -= act
        self._allocated[task.microbatch_id] -= act


# --------------------------------------------------------------------------- #
# Asynchronous P2P channel
# --------------------------------------------------------------------------- #


class Transfer(NamedTuple):
    key: Hashable
    phase: Phase
    nbytes: int = 0


@dataclass
class ChannelState:
    buffers: dict[str, deque] = field(
        default_factory=lambda: {name: deque() for name in ("fwd_recv", "fwd_send", "bwd_recv", "bwd_send")}
    )
    send_queue: deque = field(default_factory=deque)
    recv_queue: deque = field(default_factory=deque)
    completions: set = field(default_factory=set)


class Channel:
    """Simulated asynchronous P2P library for one device.

    ``post_send`` and ``post_recv`` only enqueue. Dedicated workers carry
    every posted send concurrently; a transfer lands in the matching receive
    buffer ``latency`` microseconds after it was posted and completes once a
    receive for the same key has been posted. ``poll`` reports newly
    completed transfer keys in finish-time order.

    Args:
        latency_us: constant latency or a function of the transfer.
        capacity: per-buffer slot limit; ``None`` for unbounded.
    """

    def __init__(self, latency_us: float | Callable[[Transfer], float] = 0.0, capacity: Optional[int] = None):
        self._latency = latency_us if callable(latency_us) else (lambda _t, v=float(latency_us): v)
        self.capacity = capacity
        self.state = ChannelState()
        self._in_flight: list[tuple[float, int, Transfer]] = []
        self._arrived: dict[Hashable, float] = {}
        self._posted_recv: dict[Hashable, tuple[float, Transfer]] = {}
        self._ready: list[tuple[float, int, Hashable]] = []
        self._seq = itertools.count()

    @staticmethod
    def _side(phase: Phase, direction: str) -> str:
        return ("fwd_" if phase is FORWARD else "bwd_") + direction

    def _reserve(self, buffer: str, item: Any) -> None:
        buf = self.state.buffers[buffer]
        if self.capacity is not None and len(buf) >= self.capacity:
            raise BackpressureError(f"buffer {buffer} full ({self.capacity} slots)")
        buf.append(item)

    def post_send(self, transfer: Transfer, now: float) -> None:
        self._reserve(self._side(transfer.phase, "send"), transfer.key)
        self.state.send_queue.append(transfer.key)
        heapq.heappush(self._in_flight, (now + self._latency(transfer), next(self._seq), transfer))

    def post_recv(self, transfer: Transfer, now: float) -> None:
        self._reserve(self._side(transfer.phase, "recv"), transfer.key)
        self.state.recv_queue.append(transfer.key)
        self._posted_recv[transfer.key] = (now, transfer)
        if transfer.key in self._arrived:
            self._match(transfer.key)

    def _match(self, key: Hashable) -> None:
        posted, _ = self._posted_recv.pop(key)
        done = max(posted, self._arrived.pop(key))
        heapq.heappush(self._ready, (done, next(self._seq), key))

    def _advance(self, now: float) -> None:
        while self._in_flight and self._in_flight[0][0] <= now:
            t, _, tr = heapq.heappop(self._in_flight)
            self.state.send_queue.remove(tr.key)
            self.state.buffers[self._side(tr.phase, "send")].remove(tr.key)
            self._arrived[tr.key] = t
            if tr.key in self._posted_recv:
                self._match(tr.key)

    def poll(self, now: float) -> list[Hashable]:
        """Keys of transfers completed by ``now`` and not reported before."""
        self._advance(now)
        out = []
        while self._ready and self._ready[0][0] <= now:
            _, _, key = heapq.heappop(self._ready)
            self.state.recv_queue.remove(key)
            self.state.completions.add(key)
            out.append(key)
        return out

    def consume(self, transfer: Transfer) -> None:
        """Release the receive-buffer slot of a completed transfer."""
        self.state.buffers[self._side(transfer.phase, "recv")].remove(transfer.key)

    def next_event_time(self) -> Optional[float]:
        times = [h[0][0] for h in (self._in_flight, self._ready) if h]
        return min(times) if times else None

    def pending(self) -> int:
        return len(self._in_flight) + len(self._ready) + len(self._posted_recv)

    def drain(self) -> list[Hashable]:
        return self.poll(math.inf)


# --------------------------------------------------------------------------- #
# Single-rank schedule simulation
# --------------------------------------------------------------------------- #


@dataclass
class ScheduleMetrics:
    makespan_us: float
    mem_peak_bytes: int
    bubble_us: float
    grad_sync_ready_us: dict[int, float]
    policy: str = ""
    timeline: list[tuple[TaskId, float, float]] = field(default_factory=list, repr=False)

    def to_json(self) -> dict[str, Any]:
        return {
            "policy": self.policy,
            "makespan_us": self.makespan_us,
            "mem_peak_bytes": self.mem_peak_bytes,
            "bubble_us": self.bubble_us,
            "grad_sync_ready_us": {str(c): t for c, t in sorted(self.grad_sync_ready_us.items())},
            "timeline": [[str(t), s, e] for t, s, e in self.timeline],
        }


def pipeline_deps(task: TaskId, matrix: TaskMatrix) -> list[TaskId]:
    """Producers whose output ``task`` consumes.

    Forward (mb, c) needs forward (mb, c-1); backward (mb, c) needs its own
    forward activation and backward (mb, c+1).
    """
    c, m, phase = task
    if phase is FORWARD:
        return [TaskId(c - 1, m, FORWARD)] if c > 0 else []
    deps = [TaskId(c, m, FORWARD)]
    if c < matrix.C - 1:
        deps.append(TaskId(c + 1, m, BACKWARD))
    return deps


def _transfer_for(producer: TaskId, matrix: TaskMatrix) -> Optional[TaskId]:
    """Consumer reached over the channel from ``producer``'s output, if any."""
    c, m, phase = producer
    if phase is FORWARD and c < matrix.C - 1:
        return TaskId(c + 1, m, FORWARD)
    if phase is BACKWARD and c > 0:
        return TaskId(c - 1, m, BACKWARD)
    return None


def min_feasible_cap(matrix: TaskMatrix) -> int:
    """Smallest activation cap under which any schedule completes."""
    return max(sum(matrix.activation(c, m) for c in range(matrix.C)) for m in range(matrix.M))


def simulate_schedule(
    matrix: TaskMatrix,
    policy: SchedulePolicy,
    deps: Callable[[TaskId, TaskMatrix], list[TaskId]] = pipeline_deps,
    channel: Optional[Channel] = None,
) -> ScheduleMetrics:
    """List-schedule one iteration of ``matrix`` on a single compute thread.

    Outputs that cross a chunk boundary travel through ``channel`` (a
    zero-latency one by default), which is how cross-rank latency enters the
    single-rank model.

    Raises:
        InfeasibleScheduleError: best-effort cap below the smallest feasible
            peak (one microbatch's activations across all chunks).
    """
    if policy.kind is PolicyKind.BEST_EFFORT_BFC and policy.mem_cap_bytes < min_feasible_cap(matrix):
        raise InfeasibleScheduleError(
            f"mem cap {policy.mem_cap_bytes} below the depth-first peak {min_feasible_cap(matrix)}"
        )
    channel = channel if channel is not None else Channel()
    picker = TaskPicker(matrix, policy)
    total = 2 * matrix.C * matrix.M
    done: dict[TaskId, float] = {}
    delivered: set[TaskId] = set()
    transfers: dict[TaskId, Transfer] = {}
    remaining = set(picker.order)
    timeline: list[tuple[TaskId, float, float]] = []
    now = 0.0
    busy = 0.0

    def is_ready(task: TaskId) -> bool:
        for dep in deps(task, matrix):
            if dep not in done:
                return False
            if _transfer_for(dep, matrix) == task and task not in delivered:
                return False
        return True

    while len(done) < total:
        for key in channel.poll(now):
            delivered.add(key)
        ready = [t for t in remaining if is_ready(t)]
        task = picker.pick(ready)
        if task is None:
            nxt = channel.next_event_time()
            if nxt is None or nxt <= now:
                raise RuntimeError(f"scheduler stalled at t={now} with {len(remaining)} tasks left")
            now = nxt
            continue
        for dep in deps(task, matrix):
            assert dep in done and done[dep] <= now, f"{task} started before {dep}"
        if task in transfers:
            channel.consume(transfers.pop(task))
        remaining.discard(task)
        dur = matrix.duration(task)
        start, end = now, now + dur
        timeline.append((task, start, end))
        busy += dur
        now = end
        done[task] = end
        if task.phase is FORWARD:
            picker.forward_done(task)
        else:
            picker.backward_done(task)
        consumer = _transfer_for(task, matrix)
        if consumer is not None:
            tr = Transfer(consumer, task.phase, matrix.activation(task.chunk_id, task.microbatch_id))
            transfers[consumer] = tr
            channel.post_send(tr, end)
            channel.post_recv(tr, end)

    grad_ready = {
        c: max(done[TaskId(c, m, BACKWARD)] for m in range(matrix.M)) for c in range(matrix.C)
    }
    makespan = max(done.values())
    return ScheduleMetrics(
        makespan_us=makespan,
        mem_peak_bytes=picker.peak,
        bubble_us=makespan - busy,
        grad_sync_ready_us=grad_ready,
        policy=str(policy),
        timeline=timeline,
    )


_SIZE = re.compile(r"^\s*([0-9]*\.?[0-9]+)\s*([KMGT]?i?B?)?\s*$", re.IGNORECASE)
_UNITS = {"": 1, "b": 1, "k": 1000, "kb": 1000, "kib": 1024, "m": 10**6, "mb": 10**6, "mib": 2**20,
          "g": 10**9, "gb": 10**9, "gib": 2**30, "t": 10**12, "tb": 10**12, "tib": 2**40}


def parse_size(text: str | int) -> int:
    """``"2GiB"`` -> 2147483648. Plain integers pass through."""
    if isinstance(text, int):
        return text
    m = _SIZE.match(text)
    unit = (m.group(2) or "").lower() if m else None
    if not m or unit not in _UNITS:
        raise ValueError(f"cannot parse size {text!r}")
    return int(float(m.group(1)) * _UNITS[unit])


def parse_policy(name: str, mem_cap: str | int | None = None) -> SchedulePolicy:
    key = name.strip().lower().replace("_", "-")
    if key == "dfc":
        return DFC
    if key == "bfc":
        return BFC
    if key in ("best-effort", "best-effort-bfc", "bebfc"):
        if mem_cap is None:
            raise ValueError("best-effort BFC needs a memory cap")
        return best_effort_bfc(parse_size(mem_cap))
    raise ValueError(f"unknown policy {name!r}")
