from __future__ import annotations

import json
import subprocess
import sys

import pytest

from megatrace import __version__
from megatrace.cli import EXIT_INFEASIBLE, EXIT_INTEGRITY, EXIT_OK, EXIT_PARSE, main
from megatrace.model import RankTrace
from megatrace.trace_io import emit_rank_trace, validate_chrome_trace

from conftest import ev


def read(path):
    return json.loads(path.read_text())


def test_stage_by_stage_downclock(data_copy, tmp_path):
    out = tmp_path / "run"
    assert main(["simulate", "--config", str(data_copy / "sim_8rank.toml"), "--faults",
                 str(data_copy / "faults_downclock.toml"), "--out-dir", str(out / "traces"),
                 "--ground-truth", str(out / "gt.json")]) == EXIT_OK
    assert len(list((out / "traces").glob("rank_*.json"))) == 8
    assert main(["merge", "--in", str(out / "traces"), "--out", str(out / "merged.json"), "--topo", "tp=2,pp=2,dp=2"]) == 0
    assert validate_chrome_trace((out / "merged.json").read_bytes()) == []
    assert main(["deps", "--in", str(out / "merged.json"), "--out", str(out / "ann.json"),
                 "--report", str(out / "unmatched.json")]) == 0
    assert read(out / "unmatched.json")["unmatched_count"] == 0
    assert main(["align", "--in", str(out / "ann.json"), "--out", str(out / "aligned.json"),
                 "--report", str(out / "align.json")]) == 0
    assert read(out / "align.json")["reference"] == 0
    # topology comes from the merged metadata
    assert main(["detect", "--in", str(out / "aligned.json"), "--out", str(out / "report.json")]) == 0
    report = read(out / "report.json")
    assert [r["rank"] for r in report["root_causes"]] == [5]
    assert report["root_causes"][0]["verdict"] == "ComputeSlow"


def test_pipeline_healthy_and_manifest(data_copy, tmp_path):
    out = tmp_path / "h"
    assert main(["pipeline", "--config", str(data_copy / "pipeline_healthy.toml"), "--out-dir", str(out)]) == 0
    assert read(out / "report.json")["root_causes"] == []
    manifest = read(out / "manifest.json")
    assert manifest["tool"] == "megatrace" and manifest["version"] == __version__
    assert manifest["seed"] == 7 and manifest["failed_stage"] is None
    assert set(manifest["config_hashes"]) == {"sim_8rank.toml", "faults_healthy.toml", "detect.toml"}
    assert [s["name"] for s in manifest["stages"]] == ["simulate", "merge", "deps", "align", "detect"]
    assert "report.json" in manifest["stages"][-1]["outputs"]


def test_pipeline_downclock_names_rank(data_copy, tmp_path):
    out = tmp_path / "d"
    assert main(["pipeline", "--config", str(data_copy / "pipeline_downclock.toml"), "--out-dir", str(out)]) == 0
    assert [r["rank"] for r in read(out / "report.json")["root_causes"]] == [5]


def test_pipeline_failure_recorded(tmp_path):
    traces = tmp_path / "traces"
    traces.mkdir()
    (traces / "rank_0000.json").write_text('{"rank": 0, "traceEvents": [')
    cfg = tmp_path / "p.toml"
    cfg.write_text('stages = ["ingest", "merge", "deps"]\nout_dir = "o"\n[ingest]\ndir = "traces"\n')
    assert main(["pipeline", "--config", str(cfg)]) == EXIT_PARSE
    manifest = read(tmp_path / "o" / "manifest.json")
    assert manifest["failed_stage"] == "merge"
    assert manifest["stages"][-1]["status"] == "failed"


def test_deps_integrity_error(tmp_path):
    traces = tmp_path / "t"
    traces.mkdir()
    (traces / "a.json").write_bytes(emit_rank_trace(RankTrace(0, (ev(0, "s", "send", 0, 1, peer_rank=1, payload_bytes=8),))))
    (traces / "b.json").write_bytes(emit_rank_trace(RankTrace(1, (ev(1, "r", "recv", 0, 1, peer_rank=0, payload_bytes=9),))))
    assert main(["merge", "--in", str(traces), "--out", str(tmp_path / "m.json")]) == 0
    assert main(["deps", "--in", str(tmp_path / "m.json"), "--out", str(tmp_path / "a.json")]) == EXIT_INTEGRITY


def test_schedule_metrics(tmp_path):
    out = tmp_path / "metrics.json"
    assert main(["schedule", "--chunks", "8", "--microbatches", "8", "--policy", "bfc", "--out", str(out)]) == 0
    metrics = read(out)
    assert metrics["policy"] == "bfc"
    assert metrics["mem_peak_bytes"] == 64 * 64 * 2**20
    assert len(metrics["timeline"]) == 128


def test_schedule_stdout(capsys):
    assert main(["schedule", "--chunks", "2", "--microbatches", "2", "--policy", "dfc"]) == 0
    assert json.loads(capsys.readouterr().out)["policy"] == "dfc"


@pytest.mark.parametrize("argv, code", [
    (["--policy", "best-effort-bfc", "--mem-cap", "1MiB"], EXIT_INFEASIBLE),
    (["--policy", "best-effort-bfc"], EXIT_PARSE),
    (["--policy", "zigzag"], EXIT_PARSE),
    (["--policy", "bfc", "--activation-bytes", "lots"], EXIT_PARSE),
])
def test_schedule_errors(argv, code):
    assert main(["schedule", "--chunks", "4", "--microbatches", "4", *argv]) == code


def test_malformed_trace_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["deps", "--in", str(bad), "--out", str(tmp_path / "o.json")]) == EXIT_PARSE


def test_missing_input_exit_code(tmp_path):
    assert main(["align", "--in", str(tmp_path / "none.json"), "--out", str(tmp_path / "o.json")]) == EXIT_PARSE


def test_coord_sim(data_copy, tmp_path):
    out = tmp_path / "log.json"
    assert main(["coord-sim", "--script", str(data_copy / "coord_conflict.toml"), "--seed", "7", "--out", str(out)]) == 0
    log = read(out)
    assert log["deadlocked"] is False
    assert [e["group"] for e in log["entries"]] == [1, 0]
    assert log["exchange_bits_per_round"] == 8


def test_help_lists_subcommands():
    proc = subprocess.run([sys.executable, "-m", "megatrace.cli", "--help"], capture_output=True, text=True, check=True)
    for cmd in ("simulate", "merge", "deps", "align", "detect", "schedule", "coord-sim", "pipeline"):
        assert cmd in proc.stdout


@pytest.mark.parametrize("cmd", ["simulate", "merge", "deps", "align", "detect", "schedule", "coord-sim", "pipeline"])
def test_every_subcommand_has_help(cmd, capsys):
    with pytest.raises(SystemExit) as info:
        main([cmd, "--help"])
    assert info.value.code == 0
    assert "--" in capsys.readouterr().out


def test_log_level_from_environment(tmp_path):
    cfg = tmp_path / "sim.toml"
    cfg.write_text("[sim]\ntopo = 'pp=2'\nnum_microbatches = 2\n")
    argv = [sys.executable, "-m", "megatrace.cli", "simulate", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]
    quiet = subprocess.run(argv, capture_output=True, text=True, env={"PATH": ""})
    loud = subprocess.run(argv, capture_output=True, text=True, env={"PATH": "", "MEGATRACE_LOG": "debug"})
    assert quiet.returncode == loud.returncode == EXIT_OK
    assert quiet.stderr == ""
    assert "DEBUG megatrace.sim" in loud.stderr
