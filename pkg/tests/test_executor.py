from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scapolite_ci.automation import Constraint, ExpectedOutput, Script, TypedAction, WindowsRegistry
from scapolite_ci.executor import (
    AFTER_BLACKLIST,
    ApplyMode,
    CheckCategory as C,
    NotAppliedReason,
    NotRevertedReason,
    apply_all,
    check_all,
    check_entry,
    merge_backups,
    parse_format_list,
    revert_all,
)
from scapolite_ci.rulepack import Rulepack, RulepackEntry
from scapolite_ci.target import Failure, Output, TargetFixture, TargetState

from conftest import TARGETS_DIR

KEYS = ["K1", "K2"]
NAMES = ["A", "B", "C"]


def reg(name, value, key="K1", constraint=None):
    return WindowsRegistry("Computer", key, name, TypedAction("DWORD", value), constraint)


def script(text="probe"):
    return Script(text, ExpectedOutput("FileSystemType", "NTFS"))


def pack(*autos_per_rule):
    return Rulepack("g", "p", tuple(RulepackEntry(f"R{i}", "", tuple(a)) for i, a in enumerate(autos_per_rule)))


def test_registry_check_categories():
    t = TargetState({("Computer", "K1", "A"): TypedAction("DWORD", 1),
                     ("Computer", "K1", "B"): TypedAction("DWORD", 0),
                     ("Computer", "K1", "C"): TypedAction("SZ", "1")})
    assert check_entry(RulepackEntry("R", "", (reg("A", 1),)), t)[0] == C.COMPLIANT
    assert check_entry(RulepackEntry("R", "", (reg("B", 1),)), t)[0] == C.NON_COMPLIANT
    assert check_entry(RulepackEntry("R", "", (reg("C", 1),)), t)[0] == C.NON_COMPLIANT
    assert check_entry(RulepackEntry("R", "", (reg("D", 1),)), t)[0] == C.EMPTY
    assert check_entry(RulepackEntry("R", "", ()), t)[0] == C.UNKNOWN


@pytest.mark.parametrize("stored, category", [(14, C.NON_COMPLIANT), (15, C.COMPLIANT), (99, C.COMPLIANT)])
def test_min_constraint(stored, category):
    t = TargetState({("Computer", "K1", "L"): TypedAction("DWORD", stored)})
    entry = RulepackEntry("R", "", (reg("L", 15, constraint=Constraint(min=15)),))
    assert check_entry(entry, t)[0] == category


def test_mixed_rule_precedence():
    t = TargetState({("Computer", "K1", "A"): TypedAction("DWORD", 1),
                     ("Computer", "K1", "B"): TypedAction("DWORD", 0)})
    t.register_script("probe", Failure("denied"))
    ok, bad, empty = reg("A", 1), reg("B", 1), reg("Z", 1)
    assert check_entry(RulepackEntry("R", "", (ok, empty)), t)[0] == C.EMPTY
    assert check_entry(RulepackEntry("R", "", (ok, empty, script())), t)[0] == C.UNKNOWN
    assert check_entry(RulepackEntry("R", "", (ok, empty, script(), bad)), t)[0] == C.NON_COMPLIANT


@pytest.mark.parametrize("output, category", [
    ("", C.COMPLIANT),
    ("Size : 1\nFileSystemType : NTFS\n\nSize : 2\nFileSystemType : NTFS\n", C.COMPLIANT),
    ("Size : 1\nFileSystemType : NTFS\n\nSize : 2\nFileSystemType : FAT32\n", C.NON_COMPLIANT),
    ("Size : 1\n", C.NON_COMPLIANT),
    ("garbage without separator\n", C.UNKNOWN),
])
def test_script_checks(output, category):
    t = TargetState()
    t.register_script("probe", Output(output))
    assert check_entry(RulepackEntry("R", "", (script(),)), t)[0] == category


def test_unregistered_script_is_unknown():
    assert check_entry(RulepackEntry("R", "", (script(),)), TargetState())[0] == C.UNKNOWN


def test_parse_format_list():
    assert parse_format_list("a : 1\nb: x:y\n\n\nc :2\n") == [{"a": "1", "b": "x:y"}, {"c": "2"}]
    with pytest.raises(ValueError):
        parse_format_list("novalue\n")


# -- oracle: recompute each category by scanning the raw store ---------------

def _oracle(rp, store):
    out = {}
    for e in rp.entries:
        cats = []
        for a in e.automations:
            hits = [v for (cfg, k, n), v in store.items() if (cfg, k, n) == a.triple]
            if not hits:
                cats.append("empty")
            elif hits[0] == a.action or (a.constraint and hits[0].value_type == "DWORD"
                                         and a.constraint.admits(hits[0].payload)):
                cats.append("compliant")
            else:
                cats.append("non_compliant")
        if not cats:
            out[e.rule_id] = "unknown"
        else:
            out[e.rule_id] = next(c for c in ("non_compliant", "unknown", "empty", "compliant") if c in cats)
    return out


_autos = st.lists(st.builds(reg, st.sampled_from(NAMES), st.integers(0, 2), st.sampled_from(KEYS)), max_size=3)
_store = st.dictionaries(st.tuples(st.just("Computer"), st.sampled_from(KEYS), st.sampled_from(NAMES)),
                         st.integers(0, 2).map(lambda n: TypedAction("DWORD", n)))


@settings(max_examples=200, deadline=None)
@given(st.lists(_autos, min_size=1, max_size=6), _store)
def test_check_matches_store_scan_oracle(autos, store):
    rp = pack(*autos)
    run = check_all(rp, TargetState(dict(store)))
    assert {r: c.value for r, c in run.categories().items()} == _oracle(rp, store)


@settings(max_examples=200, deadline=None)
@given(st.lists(_autos, min_size=1, max_size=6), _store)
def test_apply_then_revert_restores_store(autos, store):
    rp = pack(*autos)
    t = TargetState(dict(store))
    before = t.snapshot()
    applied = apply_all(rp, t)
    assert not applied.failed
    # the last writer of each triple wins
    for e in rp.entries:
        for a in e.automations:
            last = [b for x in rp.entries for b in x.automations if b.triple == a.triple][-1]
            assert t.read_value(*a.triple) == last.action
    revert_all(rp, t, applied.backups)
    assert t == before


def test_blacklist_excluded_from_check():
    rp = pack([reg("A", 1)], [reg("B", 1)])
    run = check_all(rp, TargetState(), blacklist=["R1", "R9"])
    assert list(run.per_rule) == ["R0"] and run.blacklisted == ["R1"]


def test_bulk_and_one_by_one_reach_same_store():
    rng = random.Random(11)
    for _ in range(50):
        rp = pack(*[[reg(rng.choice(NAMES), rng.randrange(3), rng.choice(KEYS))
                     for _ in range(rng.randrange(3))] for _ in range(6)])
        a, b = TargetState(), TargetState()
        ra = apply_all(rp, a, blacklist=["R2"])
        rb = apply_all(rp, b, blacklist=["R2"], mode=ApplyMode("one_by_one"))
        assert a == b and ra.applied == rb.applied and ra.not_applied == rb.not_applied


def test_start_at_and_after_blacklist():
    rp = pack([reg("A", 1)], [reg("B", 1)], [reg("C", 1)], [reg("D", 1)])
    run = apply_all(rp, TargetState(), mode=ApplyMode("one_by_one", "R2"))
    assert run.applied == ["R2", "R3"]
    assert run.not_applied == {"R0": NotAppliedReason.SKIPPED_BEFORE_START,
                               "R1": NotAppliedReason.SKIPPED_BEFORE_START}
    run = apply_all(rp, TargetState(), blacklist=["R1"], mode=ApplyMode("one_by_one", AFTER_BLACKLIST))
    assert run.applied == ["R2", "R3"]
    assert run.not_applied["R1"] == NotAppliedReason.BLACKLISTED
    with pytest.raises(ValueError):
        ApplyMode("bulk", "R2")
    with pytest.raises(ValueError):
        apply_all(rp, TargetState(), mode=ApplyMode("one_by_one", "R9"))


def test_not_implementable_rules():
    rp = pack([], [script()], [reg("A", 1)])
    run = apply_all(rp, TargetState())
    assert run.applied == ["R2"]
    assert run.not_applied == {"R0": NotAppliedReason.NOT_IMPLEMENTABLE, "R1": NotAppliedReason.NOT_IMPLEMENTABLE}


@pytest.mark.parametrize("kind", ["bulk", "one_by_one"])
def test_disruptor_attributed_to_last_writer(kind):
    rp = pack([reg("A", 1)], [reg("B", 1)], [reg("C", 1)])
    t = TargetState(disruptors={("Computer", "K1", "B")})
    run = apply_all(rp, t, mode=ApplyMode(kind))
    assert run.failure["rule_id"] == "R1"
    assert run.not_applied["R2"] == NotAppliedReason.ABORTED
    assert "R0" in run.applied


def test_disruptor_in_fixture_guide(full_rulepack):
    t = TargetFixture.load(TARGETS_DIR / "disruptor.yml").create()
    run = apply_all(full_rulepack, t)
    assert run.failure["rule_id"] == "R18_9_97_2_3"


def test_partial_rule_keeps_backup_and_reverts():
    rp = pack([reg("A", 1), reg("B", 1), reg("C", 1)])
    t = TargetState({("Computer", "K1", "A"): TypedAction("DWORD", 7)}, disruptors={("Computer", "K1", "B")})
    before = t.snapshot()
    run = apply_all(rp, t)
    assert run.not_applied == {"R0": NotAppliedReason.ABORTED}
    assert [p for _, p in run.backups["R0"]] == [TypedAction("DWORD", 7), None]
    t.connected = True
    revert_all(rp, t, run.backups)
    assert t.store == before.store


def test_revert_without_backup_and_after_loss():
    rp = pack([reg("A", 1)], [reg("B", 1)], [reg("C", 1)])
    t = TargetState({("Computer", "K1", "C"): TypedAction("DWORD", 5)})
    run = apply_all(rp, t, blacklist=["R1"])
    # restoring C succeeds but drops the connection before R0 is reached
    t.disruptors = frozenset({("Computer", "K1", "C")})
    rr = revert_all(rp, t, run.backups)
    assert rr.failed
    assert rr.reverted == ["R2"]
    assert rr.not_reverted == {"R0": NotRevertedReason.ABORTED, "R1": NotRevertedReason.NO_BACKUP}


def test_check_records_connection_loss():
    rp = pack([reg("A", 1)], [reg("B", 1)])
    t = TargetState()
    t.connected = False
    run = check_all(rp, t)
    assert run.failed and run.counts()[C.UNKNOWN] == 2


def test_merge_backups_keeps_order():
    a = {"R0": [(("Computer", "K", "A"), None)]}
    b = {"R0": [(("Computer", "K", "A"), TypedAction("DWORD", 1))], "R1": []}
    assert merge_backups([a, b]) == {"R0": a["R0"] + b["R0"], "R1": []}


def test_reapply_then_revert_unwinds_both_runs():
    rp = pack([reg("A", 1)])
    t = TargetState({("Computer", "K1", "A"): TypedAction("DWORD", 5)})
    first = apply_all(rp, t)
    t.write_value("Computer", "K1", "A", TypedAction("DWORD", 9))
    second = apply_all(rp, t)
    revert_all(rp, t, merge_backups([first.backups, second.backups]))
    assert t.read_value("Computer", "K1", "A") == TypedAction("DWORD", 5)
