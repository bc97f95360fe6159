"""``megatrace`` command-line entry point.

Inputs are TOML configs and Chrome-trace JSON; every output is JSON written
with sorted keys, so identical inputs and seeds give byte-identical files.

Exit codes: 0 success, 2 schema/parse/config error, 3 analysis integrity
error, 4 infeasible schedule. ``MEGATRACE_LOG`` sets the log level (default
``WARNING``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .alignment import align, anchor_gaps, apply_alignment
from .config import (
    PipelineConfig,
    file_sha256,
    load_coord_scenario,
    load_detect_config,
    load_faults,
    load_pipeline_config,
    load_sim_config,
)
from .dependency import annotate, instances_from_doc, reconstruct
from .detect import diagnose
from .dpp import TaskMatrix, parse_policy, parse_size, simulate_schedule
from .errors import (
    ConfigError,
    InfeasibleScheduleError,
    IntegrityError,
    MegatraceError,
    ProtocolError,
    TopologyError,
    TraceParseError,
    TraceSchemaError,
)
from .fbd import coordinator_harness
from .model import ParallelTopology, traces_by_rank
from .sim import run_sim
from .trace_io import (
    doc_to_traces,
    emit_chrome_trace,
    emit_rank_trace,
    merge_traces,
    read_chrome_trace,
    read_rank_traces,
)

logger = logging.getLogger("megatrace")

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_INTEGRITY = 3
EXIT_INFEASIBLE = 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, InfeasibleScheduleError):
        return EXIT_INFEASIBLE
    if isinstance(exc, (IntegrityError, ProtocolError)):
        return EXIT_INTEGRITY
    if isinstance(exc, (TraceParseError, TraceSchemaError, ConfigError, TopologyError, ValueError, OSError)):
        return EXIT_PARSE
    return EXIT_INTEGRITY


def dump_json(obj: Any) -> bytes:
    return (json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def write_json(path: str | Path, obj: Any) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(dump_json(obj))
    return p


def write_bytes(path: str | Path, data: bytes) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(data)
    return p


# --------------------------------------------------------------------------- #
# Stage implementations (shared by subcommands and the pipeline)
# --------------------------------------------------------------------------- #


def do_simulate(config: Path, faults: Path | None, out_dir: Path, ground_truth: Path | None,
                seed: int | None = None) -> list[Path]:
    cfg = load_sim_config(config, seed)
    traces, gt = run_sim(cfg, load_faults(faults))
    out = [write_bytes(out_dir / f"rank_{t.rank:04d}.json", emit_rank_trace(t)) for t in traces]
    if ground_truth is not None:
        out.append(write_json(ground_truth, {"config": cfg.to_json(), **gt.to_json()}))
    logger.info("simulated %d ranks into %s", len(traces), out_dir)
    return out


def do_merge(in_dir: Path, out: Path, topo: str | None = None) -> list[Path]:
    traces = read_rank_traces(in_dir)
    if not traces:
        raise ConfigError(f"no per-rank traces (*.json) in {in_dir}")
    metadata = {"topo": str(ParallelTopology.parse(topo))} if topo else {}
    doc = merge_traces(traces, metadata)
    return [write_bytes(out, emit_chrome_trace(doc))]


def do_deps(in_path: Path, out: Path, report: Path | None) -> list[Path]:
    doc = read_chrome_trace(in_path)
    matching = reconstruct(doc_to_traces(doc))
    if matching.unmatched:
        logger.warning("%d communication events left unmatched", len(matching.unmatched))
    outputs = [write_bytes(out, emit_chrome_trace(annotate(doc, matching.instances)))]
    if report is not None:
        outputs.append(write_json(report, matching.report()))
    return outputs


def do_align(in_path: Path, out: Path, report: Path | None, reference: int = 0) -> list[Path]:
    doc = read_chrome_trace(in_path)
    traces = doc_to_traces(doc)
    instances = instances_from_doc(doc) or reconstruct(traces).instances
    maps, rep = align(traces, instances, reference)
    outputs = [write_bytes(out, emit_chrome_trace(apply_alignment(doc, maps, rep)))]
    if report is not None:
        by_rank = traces_by_rank(traces)
        body = rep.to_json()
        body["clock_maps"] = [m.to_json() for m in maps]
        body["max_anchor_gap_us"] = {str(m.rank): anchor_gaps(m, by_rank[m.rank].events) for m in maps}
        outputs.append(write_json(report, body))
    return outputs


def do_detect(in_path: Path, out: Path, topo: str | None, config: Path | None) -> list[Path]:
    doc = read_chrome_trace(in_path)
    topo = topo or doc.metadata.get("topo")
    if not topo:
        raise ConfigError("topology unknown: pass --topo or merge with --topo")
    parsed = ParallelTopology.parse(str(topo))
    cfg = load_detect_config(config)
    traces = doc_to_traces(doc)
    if max(t.rank for t in traces) >= parsed.world_size:
        raise TopologyError(f"trace has ranks beyond topology {parsed}")
    report = diagnose(traces, instances_from_doc(doc) or None, parsed, cfg)
    body = {"topo": str(parsed), "config": cfg.to_json(), **report.to_json()}
    return [write_json(out, body)]


def do_schedule(args: argparse.Namespace) -> list[Path]:
    matrix = TaskMatrix.uniform(
        args.chunks, args.microbatches, args.forward_us, args.backward_us, parse_size(args.activation_bytes)
    )
    policy = parse_policy(args.policy, args.mem_cap)
    metrics = simulate_schedule(matrix, policy)
    body = metrics.to_json()
    body["chunks"], body["microbatches"] = args.chunks, args.microbatches
    if args.out is None:
        sys.stdout.buffer.write(dump_json(body))
        return []
    return [write_json(args.out, body)]


def do_coord_sim(script: Path, seed: int, out: Path | None) -> list[Path]:
    scenario = load_coord_scenario(script)
    log = coordinator_harness(scenario.scripts, scenario.groups, scenario.mapping, seed)
    body = {"seed": seed, "scenario": scenario.to_json(), **log.to_json()}
    if log.deadlocked:
        logger.error("coordinator run did not complete; pending %s", log.pending)
    if out is None:
        sys.stdout.buffer.write(dump_json(body))
        return []
    return [write_json(out, body)]


# --------------------------------------------------------------------------- #
# Pipeline
# --------------------------------------------------------------------------- #


def run_pipeline(cfg: PipelineConfig) -> int:
    """Run the configured stages in order and write ``manifest.json``.

    The manifest holds the tool version, seed, a SHA-256 of every referenced
    config file and of every artifact (paths relative to the output dir), and
    per-stage status. A failing stage stops the run; artifacts already
    written are kept and the manifest names the failed stage.
    """
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    trace_dir = out / "traces"
    topo: str | None = None

    if "ingest" in cfg.stages:
        trace_dir = cfg.path("ingest", "dir")  # type: ignore[assignment]
        topo = cfg.option("ingest", "topo")
    if "simulate" in cfg.stages:
        sim_path = cfg.path("simulate", "config")
        if sim_path is None:
            raise ConfigError("simulate stage needs a 'config' file")
        topo = str(load_sim_config(sim_path, cfg.seed).topo)

    steps: dict[str, Callable[[], list[Path]]] = {
        "simulate": lambda: do_simulate(
            cfg.path("simulate", "config"), cfg.path("simulate", "faults"), trace_dir,  # type: ignore[arg-type]
            out / "ground_truth.json", cfg.seed,
        ),
        "ingest": lambda: [],
        "merge": lambda: do_merge(trace_dir, out / "merged.json", topo),
        "deps": lambda: do_deps(out / "merged.json", out / "annotated.json", out / "unmatched.json"),
        "align": lambda: do_align(
            out / "annotated.json", out / "aligned.json", out / "align_report.json",
            int(cfg.option("align", "reference", 0)),
        ),
        "detect": lambda: do_detect(
            out / ("aligned.json" if "align" in cfg.stages else "annotated.json"),
            out / "report.json", cfg.option("detect", "topo", topo), cfg.path("detect", "config"),
        ),
    }

    manifest: dict[str, Any] = {
        "tool": "megatrace",
        "version": __version__,
        "seed": cfg.seed,
        "config_hashes": {name: file_sha256(p) for name, p in sorted(cfg.referenced_files().items())},
        "stages": [],
        "failed_stage": None,
    }
    code = EXIT_OK
    for stage in cfg.stages:
        entry: dict[str, Any] = {"name": stage}
        try:
            produced = steps[stage]()
        except (MegatraceError, ValueError, OSError) as exc:
            code = exit_code_for(exc)
            logger.error("stage %s failed: %s", stage, exc)
            entry.update(status="failed", error=str(exc))
            manifest["stages"].append(entry)
            manifest["failed_stage"] = stage
            break
        entry["status"] = "ok"
        entry["outputs"] = {_relative(p, out): file_sha256(p) for p in sorted(produced)}
        manifest["stages"].append(entry)
    write_json(out / "manifest.json", manifest)
    return code


def _relative(p: Path, root: Path) -> str:
    try:
        return p.resolve().relative_to(root.resolve()).as_posix()
    except ValueError:
        return p.as_posix()


# --------------------------------------------------------------------------- #
# Argument parsing
# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="megatrace",
        description="Trace analysis, straggler diagnosis and schedule models for 3-D parallel training.",
        epilog="Set MEGATRACE_LOG=DEBUG|INFO|WARNING|ERROR to control verbosity.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("simulate", help="simulate a training iteration and write per-rank traces", formatter_class=fmt)
    p.add_argument("--config", type=Path, required=True, help="simulation TOML ([sim] table)")
    p.add_argument("--faults", type=Path, default=None, help="fault TOML ([[faults]] array)")
    p.add_argument("--out-dir", type=Path, required=True, help="directory for rank_NNNN.json files")
    p.add_argument("--ground-truth", type=Path, default=None, help="where to write the oracle JSON")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("merge", help="merge per-rank traces into one Chrome trace", formatter_class=fmt)
    p.add_argument("--in", dest="in_path", type=Path, required=True, help="directory of per-rank JSON traces")
    p.add_argument("--out", type=Path, required=True, help="merged trace path")
    p.add_argument("--topo", default=None, help="record the topology (tp=..,pp=..,dp=..) in the trace metadata")

    p = sub.add_parser("deps", help="match communication events and annotate instance ids", formatter_class=fmt)
    p.add_argument("--in", dest="in_path", type=Path, required=True, help="merged trace")
    p.add_argument("--out", type=Path, required=True, help="annotated trace path")
    p.add_argument("--report", type=Path, default=None, help="unmatched-event report path")

    p = sub.add_parser("align", help="align rank clocks using collectives as anchors", formatter_class=fmt)
    p.add_argument("--in", dest="in_path", type=Path, required=True, help="annotated (or merged) trace")
    p.add_argument("--reference", type=int, default=0, help="rank whose clock is the reference")
    p.add_argument("--out", type=Path, required=True, help="aligned trace path")
    p.add_argument("--report", type=Path, default=None, help="alignment report path")

    p = sub.add_parser("detect", help="locate stragglers and slow links", formatter_class=fmt)
    p.add_argument("--in", dest="in_path", type=Path, required=True, help="aligned trace")
    p.add_argument("--topo", default=None, help="tp=..,pp=..,dp=.. (default: from trace metadata)")
    p.add_argument("--config", type=Path, default=None, help="detection TOML ([detect] table)")
    p.add_argument("--out", type=Path, required=True, help="diagnosis report path")

    p = sub.add_parser("schedule", help="model one stage's chunk/microbatch schedule", formatter_class=fmt)
    p.add_argument("--chunks", type=int, required=True, help="model chunks per stage (C)")
    p.add_argument("--microbatches", type=int, required=True, help="microbatches (M)")
    p.add_argument("--policy", default="bfc", help="dfc, bfc or best-effort-bfc")
    p.add_argument("--mem-cap", default=None, help="activation memory cap for best-effort-bfc, e.g. 2GiB")
    p.add_argument("--forward-us", type=float, default=1.0, help="forward task duration")
    p.add_argument("--backward-us", type=float, default=2.0, help="backward task duration")
    p.add_argument("--activation-bytes", default="64MiB", help="activation memory held per forward task")
    p.add_argument("--out", type=Path, default=None, help="metrics JSON path (default: stdout)")

    p = sub.add_parser("coord-sim", help="simulate the communication coordinator on a scenario", formatter_class=fmt)
    p.add_argument("--script", type=Path, required=True, help="scenario TOML (workers, groups, requests)")
    p.add_argument("--seed", type=int, default=0, help="seed for the adversarial registration order")
    p.add_argument("--out", type=Path, default=None, help="execution log path (default: stdout)")

    p = sub.add_parser("pipeline", help="run simulate|ingest -> merge -> deps -> align -> detect", formatter_class=fmt)
    p.add_argument("--config", type=Path, required=True, help="pipeline TOML")
    p.add_argument("--out-dir", type=Path, default=None, help="override the configured output directory")
    p.add_argument("--seed", type=int, default=None, help="override the configured seed")
    return parser


def _configure_logging() -> None:
    level_name = os.environ.get("MEGATRACE_LOG", "WARNING").upper()
    level = logging.getLevelName(level_name)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _dispatch(args: argparse.Namespace) -> int:
    cmd = args.command
    if cmd == "simulate":
        do_simulate(args.config, args.faults, args.out_dir, args.ground_truth, args.seed)
    elif cmd == "merge":
        do_merge(args.in_path, args.out, args.topo)
    elif cmd == "deps":
        do_deps(args.in_path, args.out, args.report)
    elif cmd == "align":
        do_align(args.in_path, args.out, args.report, args.reference)
    elif cmd == "detect":
        do_detect(args.in_path, args.out, args.topo, args.config)
    elif cmd == "schedule":
        do_schedule(args)
    elif cmd == "coord-sim":
        do_coord_sim(args.script, args.seed, args.out)
    elif cmd == "pipeline":
        return run_pipeline(load_pipeline_config(args.config, args.out_dir, args.seed))
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except (MegatraceError, ValueError, OSError) as exc:
        code = exit_code_for(exc)
        logger.error("%s", exc)
        return code


if __name__ == "__main__":
    sys.exit(main())
