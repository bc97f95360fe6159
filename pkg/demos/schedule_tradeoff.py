"""Memory against gradient-sync readiness for depth-first and breadth-first schedules.

Prints the 8x8 task matrix under DFC and BFC, then sweeps the best-effort
BFC memory cap between the two peaks.

    python demos/schedule_tradeoff.py --latency 2
"""

from __future__ import annotations

import argparse

from megatrace.dpp import BFC, DFC, Channel, TaskMatrix, best_effort_bfc, simulate_schedule


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--chunks", type=int, default=8)
    parser.add_argument("--microbatches", type=int, default=8)
    parser.add_argument("--latency", type=float, default=2.0, help="cross-chunk transfer latency in us")
    args = parser.parse_args()

    matrix = TaskMatrix.uniform(args.chunks, args.microbatches)
    runs = {str(p): simulate_schedule(matrix, p, channel=Channel(args.latency)) for p in (DFC, BFC)}
    print(f"{args.chunks}x{args.microbatches} tasks, one activation unit per forward, latency {args.latency} us\n")
    print(f"{'policy':<8}{'peak':>6}{'makespan':>10}  grad ready per chunk")
    for name, m in runs.items():
        ready = " ".join(f"{m.grad_sync_ready_us[c]:.0f}" for c in sorted(m.grad_sync_ready_us))
        print(f"{name:<8}{m.mem_peak_bytes:>6}{m.makespan_us:>10.0f}  {ready}")

    lo, hi = runs["dfc"].mem_peak_bytes, runs["bfc"].mem_peak_bytes
    print(f"\nbest-effort BFC, cap from {lo} to {hi}:")
    for cap in sorted({lo + (hi - lo) * k // 3 for k in range(4)}):
        m = simulate_schedule(matrix, best_effort_bfc(cap), channel=Channel(args.latency))
        print(f"  cap {cap:>3}: peak {m.mem_peak_bytes:>3}, makespan {m.makespan_us:.0f}")


if __name__ == "__main__":
    main()
