"""Two threads on one GPU, one peer that talks to them in the "wrong" order.

Virtual ranks 0 and 1 share GPU 0; rank 2 wants group {1, 2} before
{0, 2}. A control thread that serves requests first-come first-served can
hang on this; the bit-vector coordinator cannot.

    python demos/coordinator_conflict.py
"""

from __future__ import annotations

import itertools

from megatrace.fbd import coordinator_harness, interleavings, naive_harness, peer_choice_conflict


def main() -> None:
    sc = peer_choice_conflict()
    print("groups:", {g.group_id: list(g.members) for g in sc.groups})
    print("requests:", {v: list(s) for v, s in sc.scripts.items() if s})

    print("\nFIFO control threads, by arrival order of the first requests:")
    for arrival in itertools.permutations([0, 1, 2]):
        log = naive_harness(sc.scripts, sc.groups, sc.mapping, arrival)
        outcome = f"deadlock, stuck on {log.pending}" if log.deadlocked else f"ran {log.groups()}"
        print(f"  {arrival}: {outcome}")

    stuck = sum(coordinator_harness(sc.scripts, sc.groups, sc.mapping, schedule=s).deadlocked
                for s in interleavings([0, 1, 2], 2))
    log = coordinator_harness(sc.scripts, sc.groups, sc.mapping, seed=7)
    print(f"\ncoordinator: {stuck} of 64 two-round registration orders deadlock")
    for entry in log.entries:
        print(f"  round {entry.round}: group {entry.group_id} {list(entry.members)}")
    print(f"exchange payload per round: {log.exchange_bits[0]} bits (groups x virtual ranks)")


if __name__ == "__main__":
    main()
