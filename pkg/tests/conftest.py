from __future__ import annotations

import functools
import random

import pytest

from megatrace.model import EventKind, EventMeta, ParallelTopology, RankTrace, TraceEvent
from megatrace.sim import ClockSkew, SimConfig, run_sim


def ev(rank, name, kind, ts, dur, **meta):
    """Terse event constructor for hand-built traces."""
    if "participant_ranks" in meta:
        meta["participant_ranks"] = tuple(meta["participant_ranks"])
    return TraceEvent(name, EventKind(kind), rank, ts, dur, EventMeta(**meta))


def random_skews(topo: ParallelTopology, seed: int, max_offset: int = 2000, drift: float = 10.0) -> list[ClockSkew]:
    """Per-rank skew for every rank but 0, which stays the unskewed reference."""
    rng = random.Random(seed)
    return [ClockSkew(r, rng.randint(-max_offset, max_offset), rng.choice([-drift, drift]))
            for r in range(1, topo.world_size)]


@functools.lru_cache(maxsize=None)
def simulated(topo: str = "tp=2,pp=2,dp=2", seed: int = 0, faults: tuple = (), skew: bool = False, **kw):
    t = ParallelTopology.parse(topo)
    all_faults = list(faults) + (random_skews(t, seed) if skew else [])
    return run_sim(SimConfig(topo=t, seed=seed, **kw), all_faults)


@pytest.fixture
def healthy_8rank():
    return simulated("tp=2,pp=2,dp=2", 7)


@pytest.fixture
def two_rank_allreduce():
    return [
        RankTrace(0, (ev(0, "ar", "allreduce", 100, 50, participant_ranks=[0, 1]),)),
        RankTrace(1, (ev(1, "ar", "allreduce", 600, 20, participant_ranks=[0, 1]),)),
    ]


@pytest.fixture
def data_copy(tmp_path):
    """A writable copy of the bundled config files."""
    import shutil
    from importlib import resources

    src = resources.files("megatrace").joinpath("data")
    dst = tmp_path / "data"
    dst.mkdir()
    for entry in src.iterdir():
        if entry.name.endswith(".toml"):
            (dst / entry.name).write_bytes(entry.read_bytes())
    shutil.rmtree(dst / "__pycache__", ignore_errors=True)
    return dst
