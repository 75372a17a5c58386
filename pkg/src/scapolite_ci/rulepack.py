"""Rulepacks: the per-profile compiled artifact consumed by the executor.

The on-disk form is canonical JSON (two-space indent, fixed key order,
trailing newline), so emitting the same rulepack twice gives identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any

from .automation import (
    ConcreteAutomation,
    PolicyCatalog,
    Script,
    WindowsRegistry,
    automation_to_dict,
    parse_automation,
    resolve_rule_automations,
)
from .errors import MalformedAutomation, MalformedAction, MalformedRulepack, ScapoliteError
from .guide import Guide, select_profile

FORMAT_VERSION = 1
WHOLE_GUIDE = "__all__"


@dataclass(frozen=True)
class RulepackEntry:
    rule_id: str
    title: str
    automations: tuple[ConcreteAutomation, ...] = ()

    @property
    def no_automation(self) -> bool:
        return not self.automations

    @property
    def registry_automations(self) -> list[WindowsRegistry]:
        return [a for a in self.automations if isinstance(a, WindowsRegistry)]

    @property
    def registry_backed(self) -> bool:
        """True when every automation is a registry write (and there is one)."""
        return bool(self.automations) and all(isinstance(a, WindowsRegistry) for a in self.automations)


@dataclass(frozen=True)
class Rulepack:
    guide_id: str
    profile_id: str
    entries: tuple[RulepackEntry, ...] = ()

    def __post_init__(self) -> None:
        ids = [e.rule_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise MalformedRulepack("duplicate rule_id in rulepack")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def rule_ids(self) -> list[str]:
        return [e.rule_id for e in self.entries]

    def entry(self, rule_id: str) -> RulepackEntry:
        for e in self.entries:
            if e.rule_id == rule_id:
                return e
        raise KeyError(rule_id)


def build_rulepack(guide: Guide, profile_id: str | None, catalog: PolicyCatalog) -> Rulepack:
    """Resolve every rule of the profile to concrete automations.

    ``profile_id=None`` compiles the whole guide without overrides.
    """
    entries = []
    for rule in select_profile(guide, profile_id):
        try:
            automations = resolve_rule_automations(rule, catalog)
        except ScapoliteError as exc:
            exc.rule_id = rule.id
            raise
        entries.append(RulepackEntry(rule.id, rule.title, tuple(automations)))
    return Rulepack(guide.guide_id, profile_id or WHOLE_GUIDE, tuple(entries))


def rulepack_to_dict(rp: Rulepack) -> dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "guide_id": rp.guide_id,
        "profile_id": rp.profile_id,
        "rules": [
            {
                "rule_id": e.rule_id,
                "title": e.title,
                "no_automation": e.no_automation,
                "automations": [automation_to_dict(a) for a in e.automations],
            }
            for e in rp.entries
        ],
    }


def emit_rulepack(rp: Rulepack) -> bytes:
    return (json.dumps(rulepack_to_dict(rp), indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def load_rulepack(data: bytes | str) -> Rulepack:
    try:
        raw = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedRulepack(f"rulepack is not valid JSON: {exc}") from None
    if not isinstance(raw, dict) or not isinstance(raw.get("rules"), list):
        raise MalformedRulepack("rulepack must be an object with a 'rules' list")
    if raw.get("format_version") != FORMAT_VERSION:
        raise MalformedRulepack(f"unsupported rulepack format_version {raw.get('format_version')!r}")
    entries = []
    seen: set[str] = set()
    for item in raw["rules"]:
        if not isinstance(item, dict) or not isinstance(item.get("rule_id"), str):
            raise MalformedRulepack(f"bad rulepack entry: {item!r}")
        rid = item["rule_id"]
        if rid in seen:
            raise MalformedRulepack(f"duplicate rule_id {rid!r}")
        seen.add(rid)
        try:
            automations = tuple(parse_automation(a) for a in item.get("automations") or [])
        except (MalformedAutomation, MalformedAction) as exc:
            raise MalformedRulepack(f"{rid}: {exc}") from None
        if any(not isinstance(a, (WindowsRegistry, Script)) for a in automations):
            raise MalformedRulepack(f"{rid}: rulepacks hold only registry and script automations")
        if bool(item.get("no_automation")) != (not automations):
            raise MalformedRulepack(f"{rid}: no_automation flag disagrees with the automation list")
        entries.append(RulepackEntry(rid, str(item.get("title", "")), automations))
    return Rulepack(str(raw.get("guide_id", "")), str(raw.get("profile_id", "")), tuple(entries))


# -- static analysis --------------------------------------------------------

@dataclass(frozen=True)
class SameSettingGroup:
    config: str
    registry_key: str
    value_name: str
    rule_ids: tuple[str, ...]


@dataclass(frozen=True)
class StaticFindings:
    no_automation_ids: tuple[str, ...] = ()
    same_setting_groups: tuple[SameSettingGroup, ...] = ()

    def metric_ids(self) -> dict[str, list[str]]:
        grouped: list[str] = []
        for g in self.same_setting_groups:
            grouped.extend(r for r in g.rule_ids if r not in grouped)
        return {"no_automation": list(self.no_automation_ids), "same_setting": grouped}

    def metric_counts(self) -> dict[str, int]:
        return {
            "no_automation": len(self.no_automation_ids),
            "same_setting": len(self.same_setting_groups),
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "static",
            "no_automation": list(self.no_automation_ids),
            "same_setting": [
                {"config": g.config, "registry_key": g.registry_key,
                 "value_name": g.value_name, "rule_ids": list(g.rule_ids)}
                for g in self.same_setting_groups
            ],
        }


def analyze_rulepack(rp: Rulepack) -> StaticFindings:
    """Find rules without automation and settings written by several rules."""
    writers: dict[tuple[str, str, str], list[str]] = {}
    for e in rp.entries:
        for a in e.registry_automations:
            ids = writers.setdefault(a.triple, [])
            if e.rule_id not in ids:
                ids.append(e.rule_id)
    groups = tuple(
        SameSettingGroup(cfg, key, name, tuple(ids))
        for (cfg, key, name), ids in writers.items()
        if len(ids) >= 2
    )
    return StaticFindings(
        tuple(e.rule_id for e in rp.entries if e.no_automation),
        groups,
    )
