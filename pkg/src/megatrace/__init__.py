"""Trace analysis, straggler diagnosis and schedule models for 3-D parallel training."""

from __future__ import annotations

__version__ = "0.1.0"

from .alignment import AlignmentReport, ClockMap, align, apply_alignment
from .dependency import CommInstance, Matching, annotate, reconstruct
from .detect import DetectConfig, DiagnosisReport, Verdict, diagnose
from .dpp import BFC, DFC, SchedulePolicy, TaskMatrix, best_effort_bfc, simulate_schedule
from .errors import (
    BackpressureError,
    ConfigError,
    InfeasibleScheduleError,
    IntegrityError,
    MegatraceError,
    ProtocolError,
    TopologyError,
    TraceParseError,
    TraceSchemaError,
)
from .fbd import CommGroupSpec, CoordinatorState, RankMapping, coordinator_harness
from .model import EventKind, EventMeta, ParallelTopology, Phase, RankTrace, TraceEvent
from .sim import ClockSkew, Downclock, GroundTruth, LinkDegrade, SimConfig, run_sim
from .trace_io import (
    ChromeTraceDoc,
    emit_chrome_trace,
    merge_traces,
    parse_chrome_trace,
    parse_rank_trace,
    validate_chrome_trace,
)

__all__ = [
    "AlignmentReport", "BFC", "BackpressureError", "ChromeTraceDoc", "ClockMap", "ClockSkew", "CommGroupSpec",
    "CommInstance", "ConfigError", "CoordinatorState", "DFC", "DetectConfig", "DiagnosisReport", "Downclock",
    "EventKind", "EventMeta", "GroundTruth", "InfeasibleScheduleError", "IntegrityError", "LinkDegrade", "Matching",
    "MegatraceError", "ParallelTopology", "Phase", "ProtocolError", "RankMapping", "RankTrace", "SchedulePolicy",
    "SimConfig", "TaskMatrix", "TopologyError", "TraceEvent", "TraceParseError", "TraceSchemaError", "Verdict",
    "align", "annotate", "apply_alignment", "best_effort_bfc", "coordinator_harness", "diagnose",
    "emit_chrome_trace", "merge_traces", "parse_chrome_trace", "parse_rank_trace", "reconstruct", "run_sim",
    "simulate_schedule", "validate_chrome_trace",
]
