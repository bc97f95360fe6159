from __future__ import annotations

import json
from collections import Counter
from importlib import resources

import pytest
from hypothesis import given, settings, strategies as st

from megatrace.errors import TraceParseError, TraceSchemaError
from megatrace.model import EventKind, EventMeta, Phase, RankTrace, TraceEvent
from megatrace.trace_io import (
    ChromeTraceDoc,
    args_to_meta,
    doc_to_traces,
    emit_chrome_trace,
    emit_rank_trace,
    merge_traces,
    meta_to_args,
    parse_chrome_trace,
    parse_rank_trace,
    read_rank_traces,
    validate_chrome_trace,
)

from conftest import ev, simulated


def test_empty_rank_file():
    assert parse_rank_trace(b'{"rank": 3, "traceEvents": []}') == RankTrace(3, ())


def test_out_of_order_events_sorted():
    raw = {"rank": 0, "traceEvents": [
        {"name": "b", "cat": "compute", "ph": "X", "ts": 50, "dur": 5},
        {"name": "a", "cat": "compute", "ph": "X", "ts": 10, "dur": 5},
    ]}
    trace = parse_rank_trace(json.dumps(raw))
    assert [e.start_ts_us for e in trace.events] == [10, 50]


def test_bare_array_needs_rank():
    data = b'[{"name": "f", "ph": "X", "ts": 1, "dur": 2}]'
    assert parse_rank_trace(data, rank=4).rank == 4
    with pytest.raises(TraceSchemaError):
        parse_rank_trace(data)


def test_malformed_json_reports_offset():
    with pytest.raises(TraceParseError) as info:
        parse_rank_trace(b'{"rank": 0, "traceEvents": [}')
    assert info.value.offset == 28


@pytest.mark.parametrize(
    "event, field",
    [
        ({"name": "f", "ph": "X", "dur": 1}, "ts"),
        ({"ph": "X", "ts": 1, "dur": 1}, "name"),
        ({"name": "f", "ph": "X", "ts": 1, "dur": -1}, "dur"),
        ({"name": "f", "ph": "X", "ts": 1, "dur": 1, "cat": "bogus"}, "cat"),
        ({"name": "f", "ph": "X", "ts": 1, "dur": 1, "args": {"phase": "sideways"}}, "phase"),
        ({"name": "f", "ph": "X", "ts": 1, "dur": 1, "args": {"peer_rank": -2}}, "peer_rank"),
    ],
)
def test_schema_errors_name_field(event, field):
    with pytest.raises(TraceSchemaError) as info:
        parse_rank_trace(json.dumps({"rank": 0, "traceEvents": [event]}))
    assert info.value.field == field


def test_rank_mismatch_rejected():
    with pytest.raises(TraceSchemaError):
        parse_rank_trace(b'{"rank": 1, "traceEvents": []}', rank=2)


def test_non_span_events_skipped():
    raw = {"rank": 0, "traceEvents": [{"name": "process_name", "ph": "M", "args": {"name": "x"}}]}
    assert len(parse_rank_trace(json.dumps(raw))) == 0


def test_simulated_rank_round_trip():
    traces, _ = simulated("tp=2,pp=2,dp=2", 3)
    for t in traces:
        assert parse_rank_trace(emit_rank_trace(t)) == t


def test_merge_two_ranks():
    doc = merge_traces([RankTrace(0, (ev(0, "f", "compute", 5, 1),)), RankTrace(1, (ev(1, "f", "compute", 2, 1),))])
    assert len(doc.events) == 2
    assert doc.ranks() == [0, 1]
    assert [e.pid for e in doc.events] == [1, 0]


def test_merge_empty():
    doc = merge_traces([RankTrace(0, ())])
    assert doc.events == ()
    assert json.loads(emit_chrome_trace(doc))["traceEvents"] == []


def test_merge_rejects_duplicate_rank():
    with pytest.raises(ValueError):
        merge_traces([RankTrace(0, ()), RankTrace(0, ())])


def test_merge_preserves_multiset():
    traces, _ = simulated("tp=2,pp=2,dp=2", 3)
    doc = merge_traces(traces)
    assert len(doc.events) == sum(len(t) for t in traces)
    before = Counter((e.rank, e.name, e.start_ts_us, e.duration_us) for t in traces for e in t.events)
    after = Counter((e.pid, e.name, e.ts, e.dur) for e in doc.events)
    assert before == after
    assert doc_to_traces(doc) == sorted(traces, key=lambda t: t.rank)


def test_merge_tie_break_rank_then_name():
    traces = [
        RankTrace(1, (ev(1, "a", "compute", 0, 1),)),
        RankTrace(0, (ev(0, "b", "compute", 0, 1), ev(0, "a", "compute", 0, 1))),
    ]
    doc = merge_traces(traces)
    assert [(e.pid, e.name) for e in doc.events] == [(0, "a"), (0, "b"), (1, "a")]


def test_unknown_args_pass_through():
    meta = args_to_meta({"microbatch_id": 2, "iteration": 1, "layer": "attn"})
    assert meta.extra == {"iteration": 1, "layer": "attn"}
    assert meta_to_args(meta) == {"microbatch_id": 2, "iteration": 1, "layer": "attn"}


def test_tid_lanes():
    doc = merge_traces([RankTrace(0, (
        ev(0, "f", "compute", 0, 1),
        ev(0, "ar", "allreduce", 1, 1, participant_ranks=[0]),
        ev(0, "s", "send", 2, 1, peer_rank=1, payload_bytes=4),
    ))])
    assert [e.tid for e in doc.events] == [0, 1, 2]


def test_bare_array_container_accepted():
    doc = parse_chrome_trace(b'[{"name": "f", "cat": "compute", "ph": "X", "ts": 1, "dur": 2, "pid": 0, "tid": 0}]')
    assert len(doc.events) == 1


def test_read_rank_traces(tmp_path):
    traces, _ = simulated("tp=1,pp=2,dp=1", 0)
    for t in traces:
        (tmp_path / f"rank_{t.rank:04d}.json").write_bytes(emit_rank_trace(t))
    assert read_rank_traces(tmp_path) == list(traces)


def test_validator_rejects_bad_docs():
    with pytest.raises(TraceSchemaError):
        validate_chrome_trace({"traceEvents": [{"name": "x", "ph": "X", "ts": "soon", "pid": 0, "tid": 0}]})


def test_validator_requires_dur_on_complete_events():
    with pytest.raises(TraceSchemaError):
        validate_chrome_trace({"traceEvents": [{"name": "x", "cat": "compute", "ph": "X", "ts": 1, "pid": 0, "tid": 0}]})


def test_validator_warns_on_unknown_category():
    doc = {"traceEvents": [{"name": "x", "cat": "memcpy", "ph": "X", "ts": 1, "dur": 1, "pid": 0, "tid": 0}]}
    assert len(validate_chrome_trace(doc)) == 1


def test_bundled_example_is_clean():
    data = resources.files("megatrace").joinpath("data/example_8rank.json").read_bytes()
    assert validate_chrome_trace(data) == []
    doc = parse_chrome_trace(data)
    assert doc.ranks() == list(range(8))
    assert emit_chrome_trace(doc) == data


_names = st.sampled_from(["forward", "backward", "ar", "send", "recv", "x"])
_kinds = st.sampled_from(list(EventKind))
_metas = st.builds(
    EventMeta,
    microbatch_id=st.none() | st.integers(0, 16),
    chunk_id=st.none() | st.integers(0, 4),
    payload_bytes=st.none() | st.integers(0, 2**30),
    peer_rank=st.none() | st.integers(0, 7),
    phase=st.none() | st.sampled_from(list(Phase)),
    sync_instance_id=st.none() | st.text(max_size=8),
    extra=st.dictionaries(st.sampled_from(["iteration", "layer", "note"]), st.integers(0, 9) | st.text(max_size=4)),
)


@st.composite
def _traces(draw):
    out = []
    for rank in range(draw(st.integers(1, 4))):
        events = draw(st.lists(st.builds(
            TraceEvent, _names, _kinds, st.just(rank), st.integers(0, 10**9), st.integers(0, 10**6), _metas,
        ), max_size=12))
        out.append(RankTrace.from_events(rank, events))
    return out


@settings(max_examples=80, deadline=None)
@given(_traces())
def test_emit_parse_fixed_point(traces):
    first = emit_chrome_trace(merge_traces(traces, {"seed": 1}))
    doc = parse_chrome_trace(first)
    assert emit_chrome_trace(doc) == first
    assert validate_chrome_trace(first) == []
    # ranks without events leave nothing in the merged document
    assert doc_to_traces(doc) == [t for t in traces if t.events]


@settings(max_examples=50, deadline=None)
@given(_traces())
def test_rank_file_round_trip(traces):
    for t in traces:
        assert parse_rank_trace(emit_rank_trace(t)) == t
