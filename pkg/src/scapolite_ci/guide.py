"""Scapolite rule documents, guides and profiles.

A rule document is a YAML front-matter block followed by Markdown sections
whose headers are absolute slash paths into the front-matter object::

    ---
    scapolite:
        class: rule
        version: '0.51'
    id: BL942-1101
    ...
    ---
    ## /rule
    Enable the setting ...
    ## /implementations/0/description
    To set the protection level ...

Each section body is merged into the field its path addresses. Section
bodies are stored with surrounding newlines stripped.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from .automation import Automation, Compound, WinGpo, automation_to_dict, parse_automation
from .errors import (
    DuplicatePath,
    DuplicateRuleId,
    InvalidRule,
    MalformedAutomation,
    MalformedFrontMatter,
    MalformedProfile,
    ProfileReferencesUnknownRule,
    UnknownOption,
    UnknownProfile,
    UnresolvablePath,
)

HEADER_RE = re.compile(r"^## (/\S*)\s*$")
HISTORY_ACTIONS = ("created", "modified", "deleted")
PROFILE_FILENAMES = ("profiles.yml", "profiles.yaml")

_RULE_KEYS = ("scapolite", "id", "id_namespace", "title", "rule", "implementations", "history")
_IMPL_KEYS = ("relative_id", "description", "automations")

# fields a section may create when the front matter omits a placeholder
_MARKDOWN_FIELDS = {
    (): {"rule", "title"},
    ("implementations",): {"description"},
    ("history",): {"description"},
}


@dataclass(frozen=True)
class HistoryEntry:
    version: str
    action: str
    description: str = ""

    def __post_init__(self) -> None:
        if not self.version:
            raise InvalidRule("history entry needs a version")
        if self.action not in HISTORY_ACTIONS:
            raise InvalidRule(f"history action must be one of {HISTORY_ACTIONS}, got {self.action!r}")


@dataclass(frozen=True)
class Implementation:
    relative_id: str
    description: str = ""
    automations: tuple[Automation, ...] = ()
    extra: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.relative_id:
            raise InvalidRule("implementation needs a relative_id")


@dataclass(frozen=True)
class ScapoliteRule:
    id: str
    title: str = ""
    id_namespace: str = ""
    rule_text: str = ""
    implementations: tuple[Implementation, ...] = ()
    history: tuple[HistoryEntry, ...] = ()
    scapolite_version: str = "0.51"
    scapolite_class: str = "rule"
    extra: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.id:
            raise InvalidRule("rule id must be non-empty")
        if self.scapolite_class != "rule":
            raise InvalidRule(f"scapolite class must be 'rule', got {self.scapolite_class!r}")
        rel_ids = [i.relative_id for i in self.implementations]
        if len(set(rel_ids)) != len(rel_ids):
            raise InvalidRule(f"{self.id}: duplicate implementation relative_id")


# -- parsing ----------------------------------------------------------------

def _split_document(text: str) -> tuple[str, list[str]]:
    lines = text.split("\n")
    if not lines or lines[0].rstrip() != "---":
        raise MalformedFrontMatter("document must start with a '---' line")
    for i in range(1, len(lines)):
        if lines[i].rstrip() == "---":
            return "\n".join(lines[1:i]), lines[i + 1:]
    raise MalformedFrontMatter("front matter is not closed by a '---' line")


def _sections(body: list[str]) -> list[tuple[str, str]]:
    sections: list[tuple[str, list[str]]] = []
    for line in body:
        m = HEADER_RE.match(line)
        if m:
            sections.append((m.group(1), []))
        elif sections:
            sections[-1][1].append(line)
        elif line.strip():
            raise InvalidRule(f"text outside of a path section: {line!r}")
    return [(path, "\n".join(lines).strip("\n")) for path, lines in sections]


def _assign(data: dict[str, Any], path: str, text: str) -> None:
    segments = path.strip("/").split("/")
    if path == "/" or any(s == "" for s in segments):
        raise UnresolvablePath(f"bad section path {path!r}")
    node: Any = data
    shape: list[str] = []
    for depth, seg in enumerate(segments):
        last = depth == len(segments) - 1
        if isinstance(node, list):
            if not seg.isdigit() or int(seg) >= len(node):
                raise UnresolvablePath(f"{path}: no list element {seg!r}")
            if last:
                if node[int(seg)] is not None and not isinstance(node[int(seg)], str):
                    raise UnresolvablePath(f"{path}: addresses a structured value")
                node[int(seg)] = text
                return
            node = node[int(seg)]
        elif isinstance(node, dict):
            if last:
                if seg in node:
                    if node[seg] is not None and not isinstance(node[seg], str):
                        raise UnresolvablePath(f"{path}: addresses a structured value")
                elif seg not in _MARKDOWN_FIELDS.get(tuple(shape), set()):
                    raise UnresolvablePath(f"{path}: no field {seg!r}")
                node[seg] = text
                return
            if seg not in node:
                raise UnresolvablePath(f"{path}: no field {seg!r}")
            node = node[seg]
            shape.append(seg)
        else:
            raise UnresolvablePath(f"{path}: cannot descend into a scalar")


def _text(value: Any) -> str:
    return "" if value is None else str(value)


def _rule_from_dict(data: Mapping[str, Any]) -> ScapoliteRule:
    meta = data.get("scapolite")
    if not isinstance(meta, Mapping):
        raise InvalidRule("front matter lacks the 'scapolite' block")
    impls = []
    for raw in data.get("implementations") or []:
        if not isinstance(raw, Mapping):
            raise InvalidRule("implementation entries must be mappings")
        try:
            automations = tuple(parse_automation(a) for a in raw.get("automations") or [])
        except MalformedAutomation as exc:
            exc.rule_id = _text(data.get("id")) or None
            raise
        impls.append(Implementation(
            relative_id=_text(raw.get("relative_id")),
            description=_text(raw.get("description")),
            automations=automations,
            extra={k: v for k, v in raw.items() if k not in _IMPL_KEYS},
        ))
    history = []
    for raw in data.get("history") or []:
        if not isinstance(raw, Mapping):
            raise InvalidRule("history entries must be mappings")
        history.append(HistoryEntry(
            version=_text(raw.get("version")),
            action=_text(raw.get("action")),
            description=_text(raw.get("description")),
        ))
    return ScapoliteRule(
        id=_text(data.get("id")),
        title=_text(data.get("title")),
        id_namespace=_text(data.get("id_namespace")),
        rule_text=_text(data.get("rule")),
        implementations=tuple(impls),
        history=tuple(history),
        scapolite_version=_text(meta.get("version")),
        scapolite_class=_text(meta.get("class")),
        extra={k: v for k, v in data.items() if k not in _RULE_KEYS},
    )


def parse_rule_document(text: str) -> ScapoliteRule:
    front, body = _split_document(text)
    try:
        data = yaml.safe_load(front)
    except yaml.YAMLError as exc:
        raise MalformedFrontMatter(f"front matter is not valid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise MalformedFrontMatter("front matter must be a mapping")
    seen: set[str] = set()
    for path, content in _sections(body):
        if path in seen:
            raise DuplicatePath(f"section {path} appears twice")
        seen.add(path)
        _assign(data, path, content)
    return _rule_from_dict(data)


# -- serialization ----------------------------------------------------------

class _Dumper(yaml.SafeDumper):
    pass


def _dump_yaml(data: Any) -> str:
    return yaml.dump(data, Dumper=_Dumper, sort_keys=False, allow_unicode=True,
                     default_flow_style=False, width=1 << 16)


def _check_markdown(text: str, where: str) -> None:
    if text != text.strip("\n"):
        raise InvalidRule(f"{where}: markdown text must not start or end with a newline")
    for line in text.split("\n"):
        if HEADER_RE.match(line):
            raise InvalidRule(f"{where}: markdown line looks like a section header: {line!r}")


def serialize_rule_document(rule: ScapoliteRule) -> str:
    front: dict[str, Any] = {
        "scapolite": {"class": rule.scapolite_class, "version": rule.scapolite_version},
        "id": rule.id,
    }
    if rule.id_namespace:
        front["id_namespace"] = rule.id_namespace
    if rule.title:
        front["title"] = rule.title
    sections: list[tuple[str, str]] = []
    if rule.rule_text:
        sections.append(("/rule", rule.rule_text))
    if rule.implementations:
        impls = []
        for n, impl in enumerate(rule.implementations):
            raw: dict[str, Any] = {"relative_id": impl.relative_id}
            if impl.automations:
                raw["automations"] = [automation_to_dict(a) for a in impl.automations]
            raw.update(impl.extra)
            impls.append(raw)
            if impl.description:
                sections.append((f"/implementations/{n}/description", impl.description))
        front["implementations"] = impls
    if rule.history:
        front["history"] = [
            {"version": h.version, "action": h.action, "description": h.description}
            for h in rule.history
        ]
    front.update(rule.extra)

    parts = ["---\n", _dump_yaml(front), "---\n"]
    for path, text in sections:
        _check_markdown(text, f"{rule.id}{path}")
        parts.append(f"## {path}\n{text}\n")
    return "".join(parts)


# -- guides and profiles ----------------------------------------------------

@dataclass(frozen=True)
class ProfileDef:
    profile_id: str
    included_rule_ids: tuple[str, ...]
    value_overrides: Mapping[tuple[str, str], Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Guide:
    guide_id: str
    rules: tuple[ScapoliteRule, ...]
    profiles: Mapping[str, ProfileDef] = field(default_factory=dict)

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for r in self.rules:
            if r.id in seen:
                raise DuplicateRuleId(f"rule id {r.id!r} declared twice")
            seen.add(r.id)
        for p in self.profiles.values():
            unknown = [i for i in p.included_rule_ids if i not in seen]
            unknown += [rid for rid, _ in p.value_overrides if rid not in p.included_rule_ids]
            if unknown:
                raise ProfileReferencesUnknownRule(
                    f"profile {p.profile_id!r} references unknown or excluded rules {unknown}"
                )

    @property
    def rule_ids(self) -> list[str]:
        return [r.id for r in self.rules]

    def rule(self, rule_id: str) -> ScapoliteRule:
        for r in self.rules:
            if r.id == rule_id:
                return r
        raise KeyError(rule_id)


def _parse_profiles(data: Any, rule_ids: list[str]) -> tuple[str, dict[str, ProfileDef]]:
    if not isinstance(data, Mapping):
        raise MalformedProfile("profile file must be a mapping")
    profiles: dict[str, ProfileDef] = {}
    for pid, raw in (data.get("profiles") or {}).items():
        pid = str(pid)
        raw = raw or {}
        rules = raw.get("rules", "all")
        included = list(rule_ids) if rules == "all" else [str(r) for r in rules or []]
        if len(set(included)) != len(included):
            raise MalformedProfile(f"profile {pid!r} lists a rule twice")
        overrides: dict[tuple[str, str], Any] = {}
        for rid, options in (raw.get("overrides") or {}).items():
            if not isinstance(options, Mapping):
                raise MalformedProfile(f"profile {pid!r}: overrides for {rid} must be a mapping")
            for option, value in options.items():
                overrides[(str(rid), str(option))] = value
        profiles[pid] = ProfileDef(pid, tuple(included), overrides)
    return str(data.get("guide_id", "")), profiles


def load_guide(source: str | Path) -> Guide:
    """Load every ``*.md`` rule document (filename order) and the profile file."""
    source = Path(source)
    if not source.is_dir():
        raise MalformedProfile(f"guide directory {source} does not exist")
    rules = []
    for path in sorted(source.glob("*.md"), key=lambda p: p.name):
        try:
            rules.append(parse_rule_document(path.read_text(encoding="utf-8")))
        except InvalidRule as exc:
            raise type(exc)(f"{path.name}: {exc}") from None
    profile_file = next((source / n for n in PROFILE_FILENAMES if (source / n).is_file()), None)
    if profile_file is None:
        raise MalformedProfile(f"no profiles.yml in {source}")
    try:
        data = yaml.safe_load(profile_file.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise MalformedProfile(f"{profile_file.name}: {exc}") from None
    ids = [r.id for r in rules]
    if len(set(ids)) != len(ids):
        dup = next(i for i in ids if ids.count(i) > 1)
        raise DuplicateRuleId(f"rule id {dup!r} declared in more than one document")
    guide_id, profiles = _parse_profiles(data, ids)
    return Guide(guide_id or source.name, tuple(rules), profiles)


def _override_automation(a: Automation, options: Mapping[str, Any], hits: set[str]) -> Automation:
    if isinstance(a, WinGpo):
        matched = {k: v for k, v in options.items() if k in a.value}
        if not matched:
            return a
        hits.update(matched)
        return dataclasses.replace(a, value={**a.value, **matched})
    if isinstance(a, Compound):
        return Compound(tuple(_override_automation(c, options, hits) for c in a.automations))
    return a


def apply_overrides(rule: ScapoliteRule, options: Mapping[str, Any]) -> ScapoliteRule:
    if not options:
        return rule
    hits: set[str] = set()
    impls = tuple(
        dataclasses.replace(impl, automations=tuple(
            _override_automation(a, options, hits) for a in impl.automations))
        for impl in rule.implementations
    )
    missing = set(options) - hits
    if missing:
        err = UnknownOption(f"profile override names options not set by any policy automation: {sorted(missing)}")
        err.rule_id = rule.id
        raise err
    return dataclasses.replace(rule, implementations=impls)


def select_profile(guide: Guide, profile_id: str | None) -> list[ScapoliteRule]:
    """Rules of a profile in guide order, with option overrides applied.

    ``None`` selects the whole guide without overrides.
    """
    if profile_id is None:
        return list(guide.rules)
    if profile_id not in guide.profiles:
        raise UnknownProfile(f"unknown profile {profile_id!r}")
    profile = guide.profiles[profile_id]
    included = set(profile.included_rule_ids)
    per_rule: dict[str, dict[str, Any]] = {}
    for (rid, option), value in profile.value_overrides.items():
        per_rule.setdefault(rid, {})[option] = value
    return [apply_overrides(r, per_rule.get(r.id, {})) for r in guide.rules if r.id in included]
