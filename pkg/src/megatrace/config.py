"""TOML configuration loading for the command-line tools.

Every loader accepts either its own table (``[sim]``, ``[detect]``, ...) or
the same keys at the top level, so a single file can hold several sections.

Simulation (``[sim]``)::

    topo = "tp=2,pp=2,dp=2"         # or { tp = 2, pp = 2, dp = 2 }
    num_microbatches = 8
    seed = 7
    schedule = "1f1b"               # or "dfc" / "bfc" / "best-effort-bfc" + mem_cap_bytes

Faults (``[[faults]]`` array)::

    [[faults]]
    kind = "downclock"              # downclock | link_degrade | clock_skew
    rank = 5
    factor = 2.0

Detection (``[detect]``): any :class:`~megatrace.detect.DetectConfig` field.

Coordinator scenario (``[[workers]]``, ``[[groups]]``, ``[requests]``)::

    [[workers]]
    vrank = 0
    instance = "Forward"
    physical = 0

    [[groups]]
    id = 0
    members = [0, 2]

    [requests]
    "0" = [0]

Pipeline: see :class:`PipelineConfig`.
"""

from __future__ import annotations

import hashlib
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .detect import DetectConfig
from .errors import ConfigError, MegatraceError
from .fbd import CoordScenario
from .sim import FaultSpec, SimConfig, fault_from_json

STAGE_ORDER = ("simulate", "ingest", "merge", "deps", "align", "detect")


def load_toml(path: str | Path) -> dict[str, Any]:
    p = Path(path)
    try:
        return tomllib.loads(p.read_text("utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{p}: {exc}") from exc


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _section(doc: Mapping[str, Any], name: str) -> Mapping[str, Any]:
    sub = doc.get(name)
    return sub if isinstance(sub, Mapping) else doc


def sim_config_from_toml(doc: Mapping[str, Any], seed: int | None = None) -> SimConfig:
    body = dict(_section(doc, "sim"))
    body.pop("faults", None)
    if seed is not None:
        body["seed"] = seed
    try:
        return SimConfig.from_json(body)
    except (MegatraceError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid simulation config: {exc}") from exc


def load_sim_config(path: str | Path, seed: int | None = None) -> SimConfig:
    return sim_config_from_toml(load_toml(path), seed)


def faults_from_toml(doc: Mapping[str, Any]) -> list[FaultSpec]:
    raw = doc.get("faults", [])
    if not isinstance(raw, list):
        raise ConfigError("'faults' must be an array of tables")
    try:
        return [fault_from_json(f) for f in raw]
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid fault: {exc}") from exc


def load_faults(path: str | Path | None) -> list[FaultSpec]:
    return [] if path is None else faults_from_toml(load_toml(path))


def load_detect_config(path: str | Path | None) -> DetectConfig:
    if path is None:
        return DetectConfig()
    body = dict(_section(load_toml(path), "detect"))
    try:
        return DetectConfig.from_json(body)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid detection config: {exc}") from exc


def load_coord_scenario(path: str | Path) -> CoordScenario:
    try:
        return CoordScenario.from_json(load_toml(path))
    except MegatraceError as exc:
        raise ConfigError(f"invalid coordinator scenario: {exc}") from exc


@dataclass
class PipelineConfig:
    """Stages to run and the config files they read.

    TOML layout (paths are relative to the pipeline file)::

        seed = 7
        out_dir = "out"
        stages = ["simulate", "merge", "deps", "align", "detect"]

        [simulate]
        config = "sim.toml"
        faults = "faults.toml"      # optional

        [ingest]                    # alternative to simulate
        dir = "traces/"
        topo = "tp=2,pp=2,dp=2"

        [align]
        reference = 0

        [detect]
        config = "detect.toml"      # optional
    """

    stages: tuple[str, ...]
    out_dir: Path
    seed: int | None = None
    sections: dict[str, dict[str, Any]] = field(default_factory=dict)
    base_dir: Path = Path(".")

    def __post_init__(self) -> None:
        unknown = [s for s in self.stages if s not in STAGE_ORDER]
        if unknown:
            raise ConfigError(f"unknown pipeline stages: {unknown}")
        if not self.stages:
            raise ConfigError("pipeline has no stages")
        if "simulate" in self.stages and "ingest" in self.stages:
            raise ConfigError("a pipeline either simulates or ingests traces, not both")
        positions = [STAGE_ORDER.index(s) for s in self.stages]
        if positions != sorted(positions) or len(set(positions)) != len(positions):
            raise ConfigError(f"stages must follow {' -> '.join(STAGE_ORDER)} order, got {list(self.stages)}")

    def path(self, stage: str, key: str) -> Path | None:
        value = self.sections.get(stage, {}).get(key)
        return None if value is None else self.base_dir / str(value)

    def option(self, stage: str, key: str, default: Any = None) -> Any:
        return self.sections.get(stage, {}).get(key, default)

    def referenced_files(self) -> dict[str, Path]:
        """Config files the run depends on, keyed by their path as written."""
        out = {}
        for stage in self.stages:
            for key, value in sorted(self.sections.get(stage, {}).items()):
                if key in ("config", "faults"):
                    out[str(value)] = self.base_dir / str(value)
        return out

    def check_files(self) -> None:
        for name, p in self.referenced_files().items():
            if not p.is_file():
                raise ConfigError(f"pipeline references missing file {name!r}")
        src = self.path("ingest", "dir")
        if "ingest" in self.stages and (src is None or not src.is_dir()):
            raise ConfigError("ingest stage needs an existing 'dir'")


def load_pipeline_config(path: str | Path, out_dir: str | Path | None = None, seed: int | None = None) -> PipelineConfig:
    doc = load_toml(path)
    base = Path(path).parent
    stages = doc.get("stages")
    if not isinstance(stages, list) or not all(isinstance(s, str) for s in stages):
        raise ConfigError("'stages' must be a list of stage names")
    sections = {k: dict(v) for k, v in doc.items() if isinstance(v, Mapping)}
    target = Path(out_dir) if out_dir is not None else base / str(doc.get("out_dir", "out"))
    raw_seed = seed if seed is not None else doc.get("seed")
    cfg = PipelineConfig(tuple(stages), target, None if raw_seed is None else int(raw_seed), sections, base)
    cfg.check_files()
    return cfg
