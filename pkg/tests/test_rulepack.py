from __future__ import annotations

import json
import random

import pytest

from scapolite_ci.automation import TypedAction, WindowsRegistry
from scapolite_ci.errors import MalformedRulepack, UnknownOption, UnknownProfile
from scapolite_ci.guide import Guide, ProfileDef
from scapolite_ci.rulepack import (
    WHOLE_GUIDE,
    Rulepack,
    RulepackEntry,
    analyze_rulepack,
    build_rulepack,
    emit_rulepack,
    load_rulepack,
)


def test_whole_guide_rulepack(full_rulepack):
    assert full_rulepack.profile_id == WHOLE_GUIDE
    assert len(full_rulepack) == 12
    assert full_rulepack.entry("R18_2_1").no_automation
    assert not full_rulepack.entry("BL942-2001").registry_backed
    assert len(full_rulepack.entry("R2_3_8_1").automations) == 2


def test_profile_rulepack_applies_overrides(guide, catalog):
    rp = build_rulepack(guide, "high_security", catalog)
    length = rp.entry("BL942-1101").automations[2]
    assert length.action == TypedAction("DWORD", 20)


def test_unknown_profile(guide, catalog):
    with pytest.raises(UnknownProfile):
        build_rulepack(guide, "nope", catalog)


def test_resolution_error_names_rule(guide, catalog):
    broken = Guide(guide.guide_id, guide.rules,
                   {"p": ProfileDef("p", ("BL942-1101",), {("BL942-1101", "Minimum password length for removable data drive"): "x"})})
    with pytest.raises(Exception) as info:
        build_rulepack(broken, "p", catalog)
    assert info.value.rule_id == "BL942-1101"
    assert str(info.value).startswith("BL942-1101: ")


def test_unmatched_override_is_an_error(guide, catalog):
    broken = Guide(guide.guide_id, guide.rules,
                   {"p": ProfileDef("p", ("R2_3_1_1",), {("R2_3_1_1", "Some option"): 1})})
    with pytest.raises(UnknownOption):
        build_rulepack(broken, "p", catalog)


def test_emit_is_canonical(full_rulepack):
    data = emit_rulepack(full_rulepack)
    assert data.endswith(b"}\n")
    assert load_rulepack(data) == full_rulepack
    assert emit_rulepack(load_rulepack(data)) == data
    parsed = json.loads(data)
    assert parsed["format_version"] == 1
    assert [r["rule_id"] for r in parsed["rules"]] == full_rulepack.rule_ids


def _doc(rules):
    return json.dumps({"format_version": 1, "guide_id": "g", "profile_id": "p", "rules": rules})


@pytest.mark.parametrize("data", [
    b"not json",
    json.dumps({"rules": []}),
    _doc([{"rule_id": "R1", "title": "", "no_automation": True, "automations": []}] * 2),
    _doc([{"rule_id": "R1", "title": "", "no_automation": False, "automations": []}]),
    _doc([{"rule_id": "R1", "title": "", "no_automation": False,
           "automations": [{"system": "org.scapolite.implementation.windows_registry",
                            "registry_key": "K", "value_name": "N", "action": "DWORD:x"}]}]),
    _doc([{"rule_id": "R1", "title": "", "no_automation": False,
           "automations": [{"system": "org.scapolite.implementation.win_gpo", "ui_path": "P",
                            "value": {"main_setting": "Enabled"}}]}]),
])
def test_load_rejects(data):
    with pytest.raises(MalformedRulepack):
        load_rulepack(data)


def test_fixture_has_no_same_setting_groups(full_rulepack):
    findings = analyze_rulepack(full_rulepack)
    assert findings.no_automation_ids == ("R18_2_1",)
    assert findings.same_setting_groups == ()
    assert findings.metric_counts() == {"no_automation": 1, "same_setting": 0}


def _pairwise_oracle(rp):
    """Rule pairs writing an identical triple, by exhaustive comparison."""
    pairs = set()
    for i, a in enumerate(rp.entries):
        for b in rp.entries[i + 1:]:
            ta = {x.triple for x in a.registry_automations}
            tb = {x.triple for x in b.registry_automations}
            if ta & tb:
                pairs.add((a.rule_id, b.rule_id))
    return pairs


def test_same_setting_matches_pairwise_oracle():
    rng = random.Random(3)
    keys = ["K1", "K2"]
    names = ["A", "B", "C"]
    for _ in range(300):
        entries = []
        for i in range(rng.randrange(1, 8)):
            autos = tuple(
                WindowsRegistry(rng.choice(["Computer", "User"]), rng.choice(keys), rng.choice(names),
                                TypedAction("DWORD", rng.randrange(3)))
                for _ in range(rng.randrange(0, 3))
            )
            entries.append(RulepackEntry(f"R{i}", "", autos))
        rp = Rulepack("g", "p", tuple(entries))
        findings = analyze_rulepack(rp)
        found = set()
        for g in findings.same_setting_groups:
            assert len(g.rule_ids) >= 2
            for rule in g.rule_ids:
                assert any(a.triple == (g.config, g.registry_key, g.value_name)
                           for a in rp.entry(rule).registry_automations)
            found |= {(a, b) for a in g.rule_ids for b in g.rule_ids
                      if rp.rule_ids.index(a) < rp.rule_ids.index(b)}
        assert found == _pairwise_oracle(rp)
        assert findings.no_automation_ids == tuple(e.rule_id for e in entries if not e.automations)


def test_same_setting_ignores_duplicates_within_one_rule():
    a = WindowsRegistry("Computer", "K", "N", TypedAction("DWORD", 1))
    rp = Rulepack("g", "p", (RulepackEntry("R1", "", (a, a)),))
    assert analyze_rulepack(rp).same_setting_groups == ()
