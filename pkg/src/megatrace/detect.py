"""Three-stage straggler localisation on an aligned, annotated trace.

1. Peer comparison. DP peers (same TP and PP index) run identical kernel
   sequences, so each compute kernel is compared with the median duration of
   the same kernel on the *other* peers. Ranks with a large share of slow
   kernels become candidates.
2. Collective start lag. A genuinely slow rank arrives last at every
   synchronous call it joins; a victim that merely waits on it does not. A
   candidate that is consistently the strictly-latest starter is a compute
   root cause.
3. P2P bandwidth. ``payload / (recv end - send start)`` per transfer. Links
   whose median warm-up bandwidth falls well below the median of links in the
   same direction point at a degraded link endpoint. A transfer counts as
   warm-up when both its send and its receive precede the first backward of
   their rank, before steady-state queueing sets in.

Kernels are identified across peers by ``(name, microbatch_id, chunk_id,
iteration, occurrence)`` rather than by wall-clock order.
"""

from __future__ import annotations

import enum
import logging
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Sequence

from .dependency import CommInstance, EventRef, instances_from_traces, p2p_endpoints, reconstruct
from .model import EventKind, ParallelTopology, Phase, RankTrace, TraceEvent, dp_peers
from .trace_io import ChromeTraceDoc, doc_to_traces

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetectConfig:
    slow_ratio: float = 1.5
    slow_margin_us: float = 50.0
    candidate_fraction: float = 0.3
    late_start_margin_us: float = 100.0
    late_consistency: float = 0.7
    bw_degrade_factor: float = 0.7
    min_samples: int = 10

    def __post_init__(self) -> None:
        if self.slow_ratio <= 1:
            raise ValueError("slow_ratio must exceed 1")
        if self.slow_margin_us < 0 or self.late_start_margin_us < 0:
            raise ValueError("margins must be non-negative")
        for name in ("candidate_fraction", "late_consistency"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must be in (0, 1]")
        if not 0 < self.bw_degrade_factor < 1:
            raise ValueError("bw_degrade_factor must be in (0, 1)")
        if self.min_samples < 1:
            raise ValueError("min_samples must be positive")

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> "DetectConfig":
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown detection settings: {sorted(unknown)}")
        return cls(**obj)

    def to_json(self) -> dict[str, Any]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


class Verdict(str, enum.Enum):
    COMPUTE_SLOW = "ComputeSlow"
    LINK_SLOW = "LinkSlow"
    BOTH = "Both"
    INSUFFICIENT = "Insufficient"


@dataclass(frozen=True)
class SlowOpStats:
    rank: int
    total_ops: int
    slow_ops: int

    @property
    def slow_fraction(self) -> float:
        return self.slow_ops / self.total_ops if self.total_ops else 0.0

    def to_json(self) -> dict[str, Any]:
        return {
            "rank": self.rank,
            "total_ops": self.total_ops,
            "slow_ops": self.slow_ops,
            "slow_fraction": self.slow_fraction,
        }


@dataclass(frozen=True)
class StartLag:
    rank: int
    joined: int
    late: int

    @property
    def late_start_fraction(self) -> float:
        return self.late / self.joined if self.joined else 0.0


@dataclass(frozen=True)
class BandwidthSample:
    instance_id: str
    src: int
    dst: int
    payload_bytes: int
    latency_us: int
    phase: Phase
    direction: Optional[Phase] = None
    recv_wait_us: int = 0

    def __post_init__(self) -> None:
        if self.latency_us <= 0:
            raise ValueError("bandwidth samples need a positive latency")

    @property
    def effective_bw_bytes_per_us(self) -> float:
        return self.payload_bytes / self.latency_us

    def to_json(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "src": self.src,
            "dst": self.dst,
            "payload_bytes": self.payload_bytes,
            "latency_us": self.latency_us,
            "effective_bw_bytes_per_us": self.effective_bw_bytes_per_us,
            "phase": self.phase.value,
            "direction": self.direction.value if self.direction else None,
            "recv_wait_us": self.recv_wait_us,
        }


@dataclass(frozen=True)
class Evidence:
    verdict: Verdict
    late_start_fraction: Optional[float] = None
    bw_ratio_vs_median: Optional[float] = None
    link: Optional[tuple[int, int]] = None

    def to_json(self) -> dict[str, Any]:
        return {
            "verdict": self.verdict.value,
            "late_start_fraction": self.late_start_fraction,
            "bw_ratio_vs_median": self.bw_ratio_vs_median,
            "link": list(self.link) if self.link else None,
        }


@dataclass
class DiagnosisReport:
    candidates: list[SlowOpStats] = field(default_factory=list)
    root_causes: list[tuple[int, Evidence]] = field(default_factory=list)
    exonerated: list[int] = field(default_factory=list)
    inconclusive: list[tuple[int, Evidence]] = field(default_factory=list)
    slow_links: list[dict[str, Any]] = field(default_factory=list)

    def root_cause_ranks(self) -> list[int]:
        return [r for r, _ in self.root_causes]

    def verdict_of(self, rank: int) -> Optional[Verdict]:
        for r, ev in self.root_causes:
            if r == rank:
                return ev.verdict
        return None

    def to_json(self) -> dict[str, Any]:
        return {
            "candidates": [c.to_json() for c in self.candidates],
            "root_causes": [{"rank": r, **ev.to_json()} for r, ev in self.root_causes],
            "exonerated": list(self.exonerated),
            "inconclusive": [{"rank": r, **ev.to_json()} for r, ev in self.inconclusive],
            "slow_links": list(self.slow_links),
        }


# --------------------------------------------------------------------------- #
# Stage 1
# --------------------------------------------------------------------------- #


def _kernel_keys(trace: RankTrace) -> dict[tuple, int]:
    """Compute-kernel identity -> duration for one rank."""
    seen: dict[tuple, int] = defaultdict(int)
    out = {}
    for ev in trace.events:
        if ev.kind is not EventKind.COMPUTE:
            continue
        base = (ev.name, ev.meta.microbatch_id, ev.meta.chunk_id, ev.meta.extra.get("iteration"))
        out[base + (seen[base],)] = ev.duration_us
        seen[base] += 1
    return out


def peer_compare(doc_or_traces: ChromeTraceDoc | Sequence[RankTrace], topo: ParallelTopology,
                 cfg: DetectConfig = DetectConfig()) -> list[SlowOpStats]:
    """Per-rank share of compute kernels that are slow relative to DP peers.

    A kernel is slow when its duration exceeds ``slow_ratio`` times the median
    of the same kernel on the other peers and also exceeds that median by
    ``slow_margin_us``. Comparing against the other peers, not a median that
    includes the rank itself, keeps a 2-peer group meaningful.
    """
    traces = _traces(doc_or_traces)
    if topo.dp_size < 2:
        return []
    keyed = {t.rank: _kernel_keys(t) for t in traces}
    stats = []
    done: set[int] = set()
    for rank in sorted(keyed):
        if rank in done:
            continue
        peers = [p for p in dp_peers(rank, topo) if p in keyed]
        done.update(peers)
        if len(peers) < 2:
            continue
        common = set.intersection(*(set(keyed[p]) for p in peers))
        if any(len(keyed[p]) != len(common) for p in peers):
            logger.warning("kernel sequences differ across DP peers %s; comparing %d shared kernels", peers, len(common))
        for p in peers:
            slow = 0
            for key in common:
                others = statistics.median(keyed[q][key] for q in peers if q != p)
                d = keyed[p][key]
                if d > cfg.slow_ratio * others and d - others > cfg.slow_margin_us:
                    slow += 1
            stats.append(SlowOpStats(p, len(common), slow))
    return sorted(stats, key=lambda s: s.rank)


def select_candidates(stats: Iterable[SlowOpStats], cfg: DetectConfig) -> list[SlowOpStats]:
    return [s for s in stats if s.slow_fraction > cfg.candidate_fraction and s.total_ops >= cfg.min_samples]


# --------------------------------------------------------------------------- #
# Stage 2
# --------------------------------------------------------------------------- #


def collective_start_lag(doc_or_traces: ChromeTraceDoc | Sequence[RankTrace],
                         instances: Optional[Sequence[CommInstance]], candidates: Iterable[int],
                         cfg: DetectConfig = DetectConfig()) -> dict[int, StartLag]:
    """How often each candidate is the strictly-latest, noticeably-late starter."""
    traces = _traces(doc_or_traces)
    insts = _resolve(instances, traces)
    wanted = set(candidates)
    joined: dict[int, int] = defaultdict(int)
    late: dict[int, int] = defaultdict(int)
    for inst in insts:
        if not inst.kind.is_collective or len(inst.members) < 2:
            continue
        starts = {r: ref.event.start_ts_us for r, ref in inst.members.items()}
        first = min(starts.values())
        for r in wanted.intersection(starts):
            joined[r] += 1
            s = starts[r]
            if s > first + cfg.late_start_margin_us and all(s > v for q, v in starts.items() if q != r):
                late[r] += 1
    return {r: StartLag(r, joined[r], late[r]) for r in sorted(wanted)}


# --------------------------------------------------------------------------- #
# Stage 3
# --------------------------------------------------------------------------- #


def _warmup_positions(trace: RankTrace) -> set[int]:
    """Indices of events that precede the rank's first backward in their iteration.

    A forward of microbatch 0 on the first chunk opens a new iteration; the
    window closes at the first backward compute after it.
    """
    out = set()
    in_warmup = True
    for i, ev in enumerate(trace.events):
        if ev.kind is EventKind.COMPUTE:
            if ev.meta.phase is Phase.BACKWARD or ev.name == "backward":
                in_warmup = False
            elif ev.meta.microbatch_id == 0 and ev.meta.chunk_id in (0, None):
                in_warmup = True
        if in_warmup:
            out.add(i)
    return out


def p2p_bandwidth(doc_or_traces: ChromeTraceDoc | Sequence[RankTrace],
                  instances: Optional[Sequence[CommInstance]] = None,
                  cfg: DetectConfig = DetectConfig()) -> list[BandwidthSample]:
    """One effective-bandwidth sample per matched P2P transfer."""
    traces = _traces(doc_or_traces)
    insts = _resolve(instances, traces)
    warm = {t.rank: _warmup_positions(t) for t in traces}
    samples = []
    for inst in insts:
        if not inst.is_p2p:
            continue
        send, recv = p2p_endpoints(inst)
        latency = recv.event.end_ts_us - send.event.start_ts_us
        if latency <= 0:
            logger.warning("discarding %s: non-positive latency %d us after alignment", inst.instance_id, latency)
            continue
        # a receive posted after the receiver's own first backward mostly measures queueing there
        in_warmup = send.index in warm.get(send.rank, ()) and recv.index in warm.get(recv.rank, ())
        phase = Phase.WARMUP if in_warmup else Phase.STEADY_STATE
        samples.append(BandwidthSample(
            inst.instance_id, send.rank, recv.rank, send.event.meta.payload_bytes or 0, latency, phase,
            send.event.meta.phase, recv.event.duration_us,
        ))
    return samples


@dataclass(frozen=True)
class _LinkStat:
    link: tuple[int, int]
    direction: Optional[Phase]
    median_bw: float
    ratio: float


def _link_ratios(samples: Iterable[BandwidthSample]) -> dict[tuple[int, int], _LinkStat]:
    """Median bandwidth per link, relative to the median over links of the same direction."""
    per_link: dict[tuple[int, int, Optional[Phase]], list[float]] = defaultdict(list)
    for s in samples:
        per_link[(s.src, s.dst, s.direction)].append(s.effective_bw_bytes_per_us)
    medians = {k: statistics.median(v) for k, v in per_link.items()}
    by_dir: dict[Optional[Phase], list[float]] = defaultdict(list)
    for (_, _, d), m in medians.items():
        by_dir[d].append(m)
    ref = {d: statistics.median(v) for d, v in by_dir.items()}
    out = {}
    for (a, b, d), m in sorted(medians.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        out[(a, b)] = _LinkStat((a, b), d, m, m / ref[d] if ref[d] > 0 else 1.0)
    return out


# --------------------------------------------------------------------------- #
# Diagnosis
# --------------------------------------------------------------------------- #


def diagnose(doc_or_traces: ChromeTraceDoc | Sequence[RankTrace], instances: Optional[Sequence[CommInstance]],
             topo: ParallelTopology, cfg: DetectConfig = DetectConfig()) -> DiagnosisReport:
    """Run all three stages and combine their evidence per rank.

    A slow warm-up link only counts when the transfers on it that the
    receiver actually waited for are slow too. Otherwise it is charged to
    receiver compute if the receiver's TP group contains a compute root cause
    (the group runs in lockstep, so it was late to consume) and left
    unattributed if not. A confirmed slow link is blamed on the receiver only
    if its *other* ingress links are degraded as well, and worse than the
    sender's other egress links; otherwise on the sender. Corroboration only
    uses transfers whose receive waited for data, since the others measure
    queueing at the receiver.
    """
    traces = _traces(doc_or_traces)
    insts = _resolve(instances, traces)
    report = DiagnosisReport()

    stats = peer_compare(traces, topo, cfg)
    report.candidates = select_candidates(stats, cfg)
    cand_ranks = [c.rank for c in report.candidates]
    lags = collective_start_lag(traces, insts, cand_ranks, cfg)

    compute_slow: dict[int, float] = {}
    for r in cand_ranks:
        lag = lags[r]
        if lag.joined < cfg.min_samples:
            report.inconclusive.append((r, Evidence(Verdict.INSUFFICIENT, lag.late_start_fraction)))
        elif lag.late_start_fraction >= cfg.late_consistency:
            compute_slow[r] = lag.late_start_fraction

    samples = p2p_bandwidth(traces, insts, cfg)
    warm_links = _link_ratios(s for s in samples if s.phase is Phase.WARMUP)
    waited_links = _link_ratios(s for s in samples if s.recv_wait_us > 0)
    slow_consumers = {r for c in compute_slow for r in topo.tp_group(c)}

    def role_score(rank: int, skip: tuple[int, int], egress: bool) -> float:
        ratios = [
            st.ratio for link, st in waited_links.items()
            if link != skip and (link[0] == rank if egress else link[1] == rank)
        ]
        return min(ratios) if ratios else 1.0

    link_slow: dict[int, tuple[float, tuple[int, int]]] = {}
    for link, st in warm_links.items():
        if st.ratio >= cfg.bw_degrade_factor:
            continue
        src, dst = link
        entry = {"src": src, "dst": dst, "median_bw_bytes_per_us": st.median_bw, "ratio_vs_median": st.ratio}
        waited = waited_links.get(link)
        if waited is not None and waited.ratio >= cfg.bw_degrade_factor:
            # only slow while the receiver was busy: a late consumer, not a slow wire
            if dst in slow_consumers:
                entry["attributed_to"] = dst
                entry["explanation"] = "receiver compute"
            else:
                entry["attributed_to"] = None
                entry["explanation"] = "uncorroborated"
            report.slow_links.append(entry)
            continue
        rx = role_score(dst, link, egress=False)
        blame = dst if rx < cfg.bw_degrade_factor and rx < role_score(src, link, egress=True) else src
        entry["attributed_to"] = blame
        entry["explanation"] = "link"
        report.slow_links.append(entry)
        if blame not in link_slow or st.ratio < link_slow[blame][0]:
            link_slow[blame] = (st.ratio, link)

    for r in sorted(set(compute_slow) | set(link_slow)):
        if r in compute_slow and r in link_slow:
            ev = Evidence(Verdict.BOTH, compute_slow[r], link_slow[r][0], link_slow[r][1])
        elif r in compute_slow:
            ev = Evidence(Verdict.COMPUTE_SLOW, compute_slow[r])
        else:
            ev = Evidence(Verdict.LINK_SLOW, lags[r].late_start_fraction if r in lags else None,
                          link_slow[r][0], link_slow[r][1])
        report.root_causes.append((r, ev))

    blamed = set(compute_slow) | set(link_slow) | {r for r, _ in report.inconclusive}
    report.exonerated = [r for r in cand_ranks if r not in blamed]
    return report


# --------------------------------------------------------------------------- #
# Input plumbing
# --------------------------------------------------------------------------- #


def _traces(doc_or_traces: ChromeTraceDoc | Sequence[RankTrace]) -> list[RankTrace]:
    if isinstance(doc_or_traces, ChromeTraceDoc):
        return doc_to_traces(doc_or_traces)
    return list(doc_or_traces)


def _resolve(instances: Optional[Sequence[CommInstance]], traces: Sequence[RankTrace]) -> list[CommInstance]:
    """Instances whose member events are taken from ``traces``.

    Instances are re-pointed by ``(rank, index)`` so that analysis always sees
    the timestamps of the trace at hand (typically the aligned one). Without
    explicit instances, annotations are used, falling back to re-matching.
    """
    by_rank = {t.rank: t for t in traces}
    if instances is None:
        insts = instances_from_traces(traces)
        return insts if insts else reconstruct(traces).instances
    out = []
    for inst in instances:
        members = {}
        for r, ref in inst.members.items():
            trace = by_rank.get(r)
            if trace is None or ref.index >= len(trace.events):
                break
            members[r] = EventRef(r, ref.index, trace.events[ref.index])
        else:
            out.append(CommInstance(inst.instance_id, inst.kind, inst.group, inst.occurrence_index, members))
    return out
