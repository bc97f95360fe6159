from __future__ import annotations

import random

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from megatrace.errors import ProtocolError
from megatrace.fbd import (
    CommGroupSpec,
    CoordScenario,
    Instance,
    PhysicalRank,
    RankMapping,
    VirtualRank,
    coordinator_harness,
    exchange,
    execute_ready,
    interleavings,
    naive_harness,
    new_state,
    peer_choice_conflict,
    random_scenario,
    ready_groups,
    register,
)

QUAD = (CommGroupSpec(0, (0, 1, 2, 3)),)


def test_register_sets_bit_in_vrank_order():
    s = register(new_state(QUAD, 8), 0, 0)
    assert s.bits(0) == "10000000"
    assert s.expected_mask(0) == "11110000"


def test_register_idempotent():
    a = register(new_state(QUAD, 8), 0, 2)
    b = register(register(new_state(QUAD, 8), 0, 2), 0, 2)
    assert np.array_equal(a.table, b.table)


def test_register_all_members_matches_mask():
    s = new_state(QUAD, 8)
    for v in range(4):
        register(s, 0, v)
    assert s.bits(0) == s.expected_mask(0) == "11110000"
    assert ready_groups(s) == [0]


@pytest.mark.parametrize("group, vrank", [(0, 5), (3, 0)])
def test_register_rejects(group, vrank):
    with pytest.raises(ProtocolError):
        register(new_state(QUAD, 8), group, vrank)


def test_expected_mask_bit_counts():
    groups = (CommGroupSpec(0, (1, 3)), CommGroupSpec(1, (0, 1, 2)))
    s = new_state(groups, 4)
    assert [s.expected_mask(g) for g in (0, 1)] == ["0101", "1110"]


def test_exchange_identity_and_or():
    groups = (CommGroupSpec(0, (0, 3)),)
    a = register(new_state(groups, 4), 0, 0)
    b = new_state(groups, 4)
    merged, bits = exchange([a.copy(), b])
    assert merged.bits(0) == "1000" and bits == 4
    c = register(new_state(groups, 4), 0, 3)
    merged, _ = exchange([a, c])
    assert merged.bits(0) == "1001" and c.bits(0) == "1001"


def test_exchange_shape_mismatch():
    with pytest.raises(ProtocolError):
        exchange([new_state(QUAD, 8), new_state(QUAD, 4)])


@settings(max_examples=50, deadline=None)
@given(st.data())
def test_exchange_equals_brute_force_or(data):
    G, V = data.draw(st.integers(1, 5)), data.draw(st.integers(1, 8))
    groups = tuple(CommGroupSpec(g, tuple(range(V))) for g in range(G))
    states = [new_state(groups, V) for _ in range(4)]
    expected = np.zeros(G * V, dtype=bool)
    for s in states:
        for g, v in data.draw(st.lists(st.tuples(st.integers(0, G - 1), st.integers(0, V - 1)), max_size=10)):
            register(s, g, v)
            expected[g * V + v] = True
    merged, bits = exchange(states)
    assert bits == G * V
    assert np.array_equal(merged.table, expected)


def test_ready_and_execute():
    groups = (CommGroupSpec(0, (0, 1)), CommGroupSpec(1, (2,)), CommGroupSpec(2, (3,)))
    s = new_state(groups, 4)
    assert ready_groups(s) == []
    assert execute_ready(s)[0] == [] and s.log == []
    register(s, 0, 0)
    assert ready_groups(s) == []
    register(s, 2, 3)
    register(s, 0, 1)
    done, s = execute_ready(s)
    assert done == [0, 2] and s.log == [0, 2]
    assert not s.table.any()


def test_mapping_invariants():
    m = RankMapping.from_lists([0, 0], [1, 1])
    assert m.num_vranks == 4
    assert m.vrank(3) == VirtualRank(3, Instance.BACKWARD)
    assert m.physical(1) == PhysicalRank(0)
    assert m.hosted(PhysicalRank(1)) == [2, 3]
    with pytest.raises(ProtocolError):
        RankMapping.from_lists([0, 0], [1])
    with pytest.raises(ProtocolError):
        RankMapping({VirtualRank(0): PhysicalRank(0), VirtualRank(2, Instance.BACKWARD): PhysicalRank(0)})
    with pytest.raises(ProtocolError):
        m.vrank(9)


def test_group_spec_validation():
    assert CommGroupSpec(0, (3, 1)).members == (1, 3)
    with pytest.raises(ProtocolError):
        CommGroupSpec(0, ())
    with pytest.raises(ProtocolError):
        CommGroupSpec(0, (1, 1))


def test_single_worker_singleton_group():
    mapping = RankMapping.from_lists([0], [1])
    log = coordinator_harness({0: (0,)}, (CommGroupSpec(0, (0,)),), mapping, schedule=[{0}])
    assert log.groups() == [0] and log.entries[0].round == 1 and not log.deadlocked


def test_local_group_bypasses_coordinator():
    mapping = RankMapping.from_lists([0, 0], [1, 1])
    groups = (CommGroupSpec(0, (0, 1)), CommGroupSpec(1, (2, 3)))
    assert groups[0].is_local(mapping)
    log = coordinator_harness({0: (0,), 1: (0,), 2: (1,), 3: (1,)}, groups, mapping, seed=3)
    assert all(e.local for e in log.entries)
    assert log.per_round() == {}


def test_script_must_reference_member_groups():
    sc = peer_choice_conflict()
    with pytest.raises(ProtocolError):
        coordinator_harness({0: (1,)}, sc.groups, sc.mapping)


def test_conflict_all_two_round_interleavings():
    sc = peer_choice_conflict()
    count = 0
    for schedule in interleavings([0, 1, 2], 2):
        log = coordinator_harness(sc.scripts, sc.groups, sc.mapping, schedule=schedule)
        assert not log.deadlocked
        assert sorted(log.groups()) == [0, 1]
        # rank 2 asks for group 1 first, so it always runs first
        assert log.groups() == [1, 0]
        count += 1
    assert count == 64


@pytest.mark.parametrize("arrival, deadlocks", [((0, 1, 2), True), ((2, 0, 1), True), ((1, 0, 2), False)])
def test_naive_baseline(arrival, deadlocks):
    sc = peer_choice_conflict()
    assert naive_harness(sc.scripts, sc.groups, sc.mapping, arrival).deadlocked is deadlocks


@pytest.mark.parametrize("seed", range(50))
def test_random_scenarios_complete(seed):
    sc = random_scenario(random.Random(seed))
    log = coordinator_harness(sc.scripts, sc.groups, sc.mapping, seed=seed)
    assert not log.deadlocked and log.pending == {}
    for groups in log.per_round().values():
        assert groups == sorted(set(groups))
    assert set(log.exchange_bits) == {len(sc.groups) * sc.mapping.num_vranks}
    expected = sorted(g for g in range(len(sc.groups)) for _ in range(min(
        sum(1 for x in sc.scripts[v] if x == g) for v in sc.groups[g].members)))
    assert sorted(log.groups()) == expected


def test_harness_detects_real_deadlock():
    # opposite request orders with no global sequence cannot both finish
    mapping = RankMapping.from_lists([0, 1], [2, 3])
    groups = (CommGroupSpec(0, (0, 1)), CommGroupSpec(1, (0, 1)))
    log = coordinator_harness({0: (0, 1), 1: (1, 0)}, groups, mapping, seed=0)
    assert log.deadlocked and log.pending == {0: 0, 1: 1}


def test_scenario_json_round_trip():
    sc = random_scenario(random.Random(5))
    again = CoordScenario.from_json(sc.to_json())
    assert again.to_json() == sc.to_json()


def test_scenario_json_rejects_garbage():
    with pytest.raises(ProtocolError):
        CoordScenario.from_json({"groups": []})


def test_log_json_shape():
    sc = peer_choice_conflict()
    doc = coordinator_harness(sc.scripts, sc.groups, sc.mapping, seed=7).to_json()
    assert doc["exchange_bits_per_round"] == 8
    assert [e["group"] for e in doc["entries"]] == [1, 0]
