"""Virtual/physical rank mapping and a bit-vector communication coordinator.

Forward and backward instances of a model run as threads ("virtual ranks")
that may share a GPU ("physical rank"). Every physical rank has one control
thread. Before any cross-GPU collective is launched, each participant sets
its bit in the group's row of a ``G x V`` table; control threads OR their
tables together, and only groups whose row equals the expected membership
mask are launched, in ascending group order. Launching only fully-requested
groups is what removes the peer-choice deadlock a naive first-come control
thread runs into.

Groups whose members all live on one physical rank are "local": they share
device memory and bypass the coordinator entirely.
"""

from __future__ import annotations

import enum
import itertools
import logging
import random
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ProtocolError

logger = logging.getLogger(__name__)


class Instance(str, enum.Enum):
    FORWARD = "Forward"
    BACKWARD = "Backward"


@dataclass(frozen=True, order=True)
class VirtualRank:
    value: int
    instance: Instance = Instance.FORWARD


@dataclass(frozen=True, order=True)
class PhysicalRank:
    value: int


@dataclass(frozen=True)
class RankMapping:
    """Total map from virtual ranks to the physical rank hosting them.

    Virtual rank values are unique across both instances and dense
    (``0..V-1``), so a value doubles as the bit position in the table.
    """

    assignment: Mapping[VirtualRank, PhysicalRank]

    def __post_init__(self) -> None:
        values = sorted(v.value for v in self.assignment)
        if values != list(range(len(values))):
            raise ProtocolError(f"virtual rank values must be 0..V-1 without gaps, got {values}")
        fwd = sum(v.instance is Instance.FORWARD for v in self.assignment)
        bwd = len(self.assignment) - fwd
        if fwd != bwd:
            raise ProtocolError(f"forward and backward instances need equal rank counts, got {fwd} and {bwd}")

    @classmethod
    def from_lists(cls, forward: Sequence[int], backward: Sequence[int]) -> "RankMapping":
        """Forward virtual ranks ``0..n-1`` then backward ``n..2n-1``, each given its physical rank."""
        if len(forward) != len(backward):
            raise ProtocolError("forward and backward instances need equal rank counts")
        out: dict[VirtualRank, PhysicalRank] = {}
        for i, p in enumerate(forward):
            out[VirtualRank(i, Instance.FORWARD)] = PhysicalRank(int(p))
        for i, p in enumerate(backward):
            out[VirtualRank(len(forward) + i, Instance.BACKWARD)] = PhysicalRank(int(p))
        return cls(out)

    @property
    def num_vranks(self) -> int:
        return len(self.assignment)

    def vrank(self, value: int) -> VirtualRank:
        for v in self.assignment:
            if v.value == value:
                return v
        raise ProtocolError(f"unknown virtual rank {value}")

    def physical(self, vrank: VirtualRank | int) -> PhysicalRank:
        v = self.vrank(vrank) if isinstance(vrank, int) else vrank
        try:
            return self.assignment[v]
        except KeyError:
            raise ProtocolError(f"virtual rank {v} is not mapped") from None

    def physical_ranks(self) -> list[PhysicalRank]:
        return sorted(set(self.assignment.values()))

    def hosted(self, phys: PhysicalRank) -> list[int]:
        return sorted(v.value for v, p in self.assignment.items() if p == phys)


@dataclass(frozen=True)
class CommGroupSpec:
    group_id: int
    members: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.members:
            raise ProtocolError(f"group {self.group_id} has no members")
        if len(set(self.members)) != len(self.members):
            raise ProtocolError(f"group {self.group_id} lists a member twice: {list(self.members)}")
        object.__setattr__(self, "members", tuple(sorted(self.members)))

    def is_local(self, mapping: RankMapping) -> bool:
        return len({mapping.physical(m) for m in self.members}) == 1


def mask_string(bits: np.ndarray) -> str:
    """Render a row with virtual rank 0 as the leftmost character."""
    return "".join("1" if b else "0" for b in bits)


@dataclass
class CoordinatorState:
    """One control thread's view of the ``G x V`` readiness table.

    ``table`` is the flattened row-major bit matrix; row ``g`` is
    ``table[g*V:(g+1)*V]``.
    """

    groups: tuple[CommGroupSpec, ...]
    vec_len: int
    table: np.ndarray = field(default=None)  # type: ignore[assignment]
    expected: np.ndarray = field(default=None, init=False)  # type: ignore[assignment]
    log: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        ids = [g.group_id for g in self.groups]
        if ids != list(range(len(ids))):
            raise ProtocolError(f"group ids must be 0..G-1 in order, got {ids}")
        expected = np.zeros((len(self.groups), self.vec_len), dtype=bool)
        for g in self.groups:
            if min(g.members) < 0 or max(g.members) >= self.vec_len:
                raise ProtocolError(f"group {g.group_id} references a virtual rank outside 0..{self.vec_len - 1}")
            expected[g.group_id, list(g.members)] = True
        self.expected = expected.reshape(-1)
        if self.table is None:
            self.table = np.zeros(self.expected.size, dtype=bool)
        elif self.table.shape != self.expected.shape:
            raise ProtocolError(f"table has shape {self.table.shape}, expected {self.expected.shape}")

    @property
    def num_groups(self) -> int:
        return len(self.groups)

    def row(self, group_id: int) -> np.ndarray:
        return self.table[group_id * self.vec_len : (group_id + 1) * self.vec_len]

    def expected_row(self, group_id: int) -> np.ndarray:
        return self.expected[group_id * self.vec_len : (group_id + 1) * self.vec_len]

    def bits(self, group_id: int) -> str:
        return mask_string(self.row(group_id))

    def expected_mask(self, group_id: int) -> str:
        return mask_string(self.expected_row(group_id))

    def copy(self) -> "CoordinatorState":
        return CoordinatorState(self.groups, self.vec_len, self.table.copy(), list(self.log))


def new_state(groups: Sequence[CommGroupSpec], num_vranks: int) -> CoordinatorState:
    return CoordinatorState(tuple(groups), num_vranks)


def register(state: CoordinatorState, group_id: int, vrank: int) -> CoordinatorState:
    """Set ``vrank``'s bit in ``group_id``'s row (idempotent, in place).

    Raises:
        ProtocolError: unknown group or ``vrank`` is not a member.
    """
    if not 0 <= group_id < state.num_groups:
        raise ProtocolError(f"unknown group {group_id}")
    if vrank not in state.groups[group_id].members:
        raise ProtocolError(f"virtual rank {vrank} is not a member of group {group_id}")
    state.table[group_id * state.vec_len + vrank] = True
    return state


def exchange(states: Sequence[CoordinatorState]) -> tuple[CoordinatorState, int]:
    """Bitwise-OR all tables into every state.

    Returns the first (now merged) state and the payload each coordinator
    contributed, in bits. The payload is the flattened table size, ``G * V``,
    independent of how many requests are pending.

    Raises:
        ProtocolError: the states disagree on ``(G, V)``.
    """
    if not states:
        raise ProtocolError("exchange needs at least one coordinator")
    shape = (states[0].num_groups, states[0].vec_len)
    for s in states[1:]:
        if (s.num_groups, s.vec_len) != shape:
            raise ProtocolError(f"shape mismatch in exchange: {shape} vs {(s.num_groups, s.vec_len)}")
    merged = np.logical_or.reduce([s.table for s in states])
    for s in states:
        s.table[:] = merged
    return states[0], int(merged.size)


def ready_groups(state: CoordinatorState) -> list[int]:
    """Groups whose row equals their expected mask, ascending."""
    rows = state.table.reshape(state.num_groups, state.vec_len)
    want = state.expected.reshape(state.num_groups, state.vec_len)
    return [int(g) for g in np.flatnonzero((rows == want).all(axis=1))]


def execute_ready(state: CoordinatorState) -> tuple[list[int], CoordinatorState]:
    """Launch every ready group in ascending order, clearing its row and logging it."""
    done = ready_groups(state)
    for g in done:
        state.row(g)[:] = False
        state.log.append(g)
    return done, state


# --------------------------------------------------------------------------- #
# Simulated multi-worker harness
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class LogEntry:
    round: int
    group_id: int
    members: tuple[int, ...]
    local: bool

    def to_json(self) -> dict[str, Any]:
        return {"round": self.round, "group": self.group_id, "members": list(self.members), "local": self.local}


@dataclass
class ExecutionLog:
    entries: list[LogEntry] = field(default_factory=list)
    rounds: int = 0
    exchange_bits: list[int] = field(default_factory=list)
    deadlocked: bool = False
    pending: dict[int, int] = field(default_factory=dict)

    def groups(self) -> list[int]:
        return [e.group_id for e in self.entries]

    def per_round(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for e in self.entries:
            if not e.local:
                out.setdefault(e.round, []).append(e.group_id)
        return out

    def to_json(self) -> dict[str, Any]:
        return {
            "rounds": self.rounds,
            "deadlocked": self.deadlocked,
            "pending": {str(k): v for k, v in sorted(self.pending.items())},
            "exchange_bits_per_round": self.exchange_bits[0] if self.exchange_bits else 0,
            "entries": [e.to_json() for e in self.entries],
        }


def _check_scripts(scripts: Mapping[int, Sequence[int]], groups: Sequence[CommGroupSpec]) -> None:
    for v, script in scripts.items():
        for g in script:
            if not 0 <= g < len(groups):
                raise ProtocolError(f"virtual rank {v} requests unknown group {g}")
            if v not in groups[g].members:
                raise ProtocolError(f"virtual rank {v} requests group {g} it is not a member of")


def coordinator_harness(
    scripts: Mapping[int, Sequence[int]],
    groups: Sequence[CommGroupSpec],
    mapping: RankMapping,
    seed: int | None = 0,
    *,
    schedule: Sequence[Iterable[int]] | None = None,
    register_prob: float = 0.5,
    max_rounds: int | None = None,
) -> ExecutionLog:
    """Simulate control threads serving blocking per-worker request scripts.

    ``scripts[v]`` is the ordered list of group ids virtual rank ``v`` will
    request; a worker issues its next request only once the previous one has
    executed. Each round, an adversary picks which workers with an
    outstanding request get to register it: from ``schedule[round]`` when
    given, else each with probability ``register_prob`` drawn from ``seed``.
    Once the schedule is exhausted (or a worker has been skipped twice in a
    row) registration is fair, which bounds the run. Every round ends with
    one exchange and an ordered execution on every coordinator.

    The run stops when all scripts finish, or is marked ``deadlocked`` when
    every outstanding request is registered and nothing is ready.

    Raises:
        ProtocolError: a script requests a group its worker is not in, or a
            coordinator broke safety (executed before all members registered)
            or ordering.
    """
    _check_scripts(scripts, groups)
    rng = random.Random(seed)
    vlen = mapping.num_vranks
    physical = mapping.physical_ranks()
    local = {g.group_id: g.is_local(mapping) for g in groups}
    coords = {p: new_state(groups, vlen) for p in physical}
    # local groups never reach the table; their host tracks arrivals directly
    local_pending: dict[int, set[int]] = {g.group_id: set() for g in groups if local[g.group_id]}

    pos = {v: 0 for v in scripts}
    registered = {v: False for v in scripts}
    skipped = {v: 0 for v in scripts}
    log = ExecutionLog()
    total = sum(len(s) for s in scripts.values())
    limit = max_rounds if max_rounds is not None else 3 * total + 3 + len(schedule or ())

    def outstanding() -> list[int]:
        return [v for v in sorted(scripts) if pos[v] < len(scripts[v])]

    rnd = 0
    while outstanding():
        rnd += 1
        if rnd > limit:
            log.deadlocked = True
            break
        waiting = [v for v in outstanding() if not registered[v]]
        if schedule is not None and rnd <= len(schedule):
            chosen = set(schedule[rnd - 1]) & set(waiting)
        elif schedule is not None:
            chosen = set(waiting)
        else:
            chosen = {v for v in waiting if skipped[v] >= 2 or rng.random() < register_prob}
        for v in waiting:
            skipped[v] = 0 if v in chosen else skipped[v] + 1

        for v in sorted(chosen):
            g = scripts[v][pos[v]]
            registered[v] = True
            if local[g]:
                local_pending[g].add(v)
            else:
                register(coords[mapping.physical(v)], g, v)

        executed: list[LogEntry] = []
        for g in sorted(local_pending):
            if local_pending[g] == set(groups[g].members):
                local_pending[g].clear()
                executed.append(LogEntry(rnd, g, groups[g].members, True))

        merged, bits = exchange(list(coords.values()))
        log.exchange_bits.append(bits)
        before = merged.table.copy()
        ready = None
        for p in physical:
            done, _ = execute_ready(coords[p])
            ready = done if ready is None else ready
            if done != ready:
                raise ProtocolError(f"coordinator {p.value} executed {done}, peers executed {ready}")
        ready = ready or []
        if ready != sorted(set(ready)):
            raise ProtocolError(f"round {rnd} executed groups out of order: {ready}")
        for g in ready:
            row = before[g * vlen : (g + 1) * vlen]
            if not np.array_equal(row, coords[physical[0]].expected_row(g)):
                raise ProtocolError(f"group {g} executed with bits {mask_string(row)}")
            executed.append(LogEntry(rnd, g, groups[g].members, False))

        for entry in executed:
            for v in entry.members:
                if v in pos and pos[v] < len(scripts[v]) and scripts[v][pos[v]] == entry.group_id and registered[v]:
                    pos[v] += 1
                    registered[v] = False
        log.entries.extend(executed)

        if not executed and all(registered[v] for v in outstanding()):
            log.deadlocked = True
            break

    log.rounds = rnd
    log.pending = {v: scripts[v][pos[v]] for v in outstanding()}
    if log.deadlocked:
        logger.warning("coordinator stalled after %d rounds with pending %s", rnd, log.pending)
    return log


def naive_harness(
    scripts: Mapping[int, Sequence[int]],
    groups: Sequence[CommGroupSpec],
    mapping: RankMapping,
    arrival: Sequence[int],
) -> ExecutionLog:
    """Baseline without the coordinator: each control thread serves requests FIFO.

    A control thread launches the request at the head of its queue at once and
    blocks until every member's control thread has the same group at its head.
    ``arrival`` lists virtual ranks in the order their *first* requests reach
    their control thread; later requests are enqueued as soon as the previous
    one completes. Local groups still bypass the control thread.
    """
    _check_scripts(scripts, groups)
    queues: dict[PhysicalRank, list[tuple[int, int]]] = {p: [] for p in mapping.physical_ranks()}
    pos = {v: 0 for v in scripts}
    local_pending: dict[int, set[int]] = {g.group_id: set() for g in groups if g.is_local(mapping)}
    log = ExecutionLog()

    def issue(v: int) -> None:
        if pos[v] >= len(scripts[v]):
            return
        g = scripts[v][pos[v]]
        if g in local_pending:
            local_pending[g].add(v)
        else:
            queues[mapping.physical(v)].append((g, v))

    order = list(arrival) + [v for v in sorted(scripts) if v not in arrival]
    for v in order:
        issue(v)

    step = 0
    while True:
        step += 1
        fired: LogEntry | None = None
        for g in sorted(local_pending):
            if local_pending[g] and local_pending[g] == set(groups[g].members):
                local_pending[g].clear()
                fired = LogEntry(step, g, groups[g].members, True)
                break
        if fired is None:
            heads = {p: q[0] for p, q in queues.items() if q}
            for g in sorted({h[0] for h in heads.values()}):
                need = groups[g].members
                # every member's request must be at the head of its control thread
                if all(any(h == (g, m) for h in heads.values()) for m in need):
                    # members sharing a control thread are served one after another
                    counts: dict[PhysicalRank, int] = {}
                    for m in need:
                        counts[mapping.physical(m)] = counts.get(mapping.physical(m), 0) + 1
                    if all(c == 1 for c in counts.values()):
                        for m in need:
                            queues[mapping.physical(m)].pop(0)
                        fired = LogEntry(step, g, need, False)
                        break
        if fired is None:
            break
        log.entries.append(fired)
        for v in fired.members:
            pos[v] += 1
            issue(v)

    log.rounds = step
    log.pending = {v: scripts[v][pos[v]] for v in sorted(scripts) if pos[v] < len(scripts[v])}
    log.deadlocked = bool(log.pending)
    return log


# --------------------------------------------------------------------------- #
# Scenarios
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class CoordScenario:
    mapping: RankMapping
    groups: tuple[CommGroupSpec, ...]
    scripts: Mapping[int, tuple[int, ...]]

    def to_json(self) -> dict[str, Any]:
        return {
            "workers": [
                {"vrank": v.value, "instance": v.instance.value, "physical": p.value}
                for v, p in sorted(self.mapping.assignment.items())
            ],
            "groups": [{"id": g.group_id, "members": list(g.members)} for g in self.groups],
            "requests": {str(v): list(s) for v, s in sorted(self.scripts.items())},
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "CoordScenario":
        """Parse the ``workers`` / ``groups`` / ``requests`` layout used in scenario files."""
        try:
            assignment = {
                VirtualRank(int(w["vrank"]), Instance(w.get("instance", "Forward"))): PhysicalRank(int(w["physical"]))
                for w in obj["workers"]
            }
            groups = tuple(
                CommGroupSpec(int(g.get("id", i)), tuple(int(m) for m in g["members"]))
                for i, g in enumerate(obj["groups"])
            )
            scripts = {int(v): tuple(int(g) for g in s) for v, s in obj.get("requests", {}).items()}
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed coordinator scenario: {exc}") from exc
        mapping = RankMapping(assignment)
        for v in scripts:
            mapping.vrank(v)
        return cls(mapping, groups, scripts)


def peer_choice_conflict() -> CoordScenario:
    """Virtual ranks 0 and 1 share a GPU; rank 2 talks to 1 before 0.

    Group 0 is ``{0, 2}``, group 1 is ``{1, 2}``. A FIFO control thread on the
    shared GPU that starts 0's transfer first blocks 1's, which rank 2 waits on.
    Rank 3 is an idle backward worker that keeps the instance counts equal.
    """
    mapping = RankMapping.from_lists(forward=[0, 0], backward=[1, 1])
    groups = (CommGroupSpec(0, (0, 2)), CommGroupSpec(1, (1, 2)))
    return CoordScenario(mapping, groups, {0: (0,), 1: (1,), 2: (1, 0), 3: ()})


def random_scenario(rng: random.Random, num_vranks: int = 8, num_groups: int = 6, length: int = 12) -> CoordScenario:
    """Random placement, groups and request scripts.

    Scripts are projections of one global request sequence onto each member,
    the SPMD ordering a training framework guarantees, so they are
    deadlock-free for a coordinator that only launches complete groups.
    """
    half = num_vranks // 2
    num_phys = rng.randint(2, max(2, half))
    mapping = RankMapping.from_lists(
        [rng.randrange(num_phys) for _ in range(half)], [rng.randrange(num_phys) for _ in range(half)]
    )
    groups = tuple(
        CommGroupSpec(g, tuple(rng.sample(range(num_vranks), rng.randint(2, min(4, num_vranks)))))
        for g in range(num_groups)
    )
    sequence = [rng.randrange(num_groups) for _ in range(length)]
    scripts = {v: tuple(g for g in sequence if v in groups[g].members) for v in range(num_vranks)}
    return CoordScenario(mapping, groups, scripts)


def interleavings(workers: Sequence[int], rounds: int) -> Iterator[tuple[frozenset[int], ...]]:
    """Every choice of which workers register in each of ``rounds`` rounds."""
    subsets = [frozenset(c) for n in range(len(workers) + 1) for c in itertools.combinations(workers, n)]
    return itertools.product(subsets, repeat=rounds)
