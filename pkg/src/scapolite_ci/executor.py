"""The native mechanism: check, apply and revert a rulepack on a target.

All three operations encode failures in their result objects instead of
raising, so a runner can always record what happened before a connection
was lost.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping

from .automation import Script, TypedAction, WindowsRegistry, format_action
from .errors import ConnectionLost, ScriptError, UnknownScript
from .rulepack import Rulepack, RulepackEntry
from .target import TargetState, Triple


class CheckCategory(str, Enum):
    COMPLIANT = "compliant"
    NON_COMPLIANT = "non_compliant"
    EMPTY = "empty"
    UNKNOWN = "unknown"


CATEGORIES = tuple(CheckCategory)

# precedence when a rule has several automations: the first matching wins
_PRECEDENCE = (CheckCategory.NON_COMPLIANT, CheckCategory.UNKNOWN,
               CheckCategory.EMPTY, CheckCategory.COMPLIANT)


def _worst(categories: Iterable[CheckCategory]) -> CheckCategory:
    cats = set(categories)
    for c in _PRECEDENCE:
        if c in cats:
            return c
    return CheckCategory.UNKNOWN


@dataclass
class CheckRun:
    activity_id: str
    per_rule: dict[str, tuple[CheckCategory, str]] = field(default_factory=dict)
    blacklisted: list[str] = field(default_factory=list)
    tool: str = "native"
    failure: str | None = None

    @property
    def failed(self) -> bool:
        return self.failure is not None

    def ids(self, category: CheckCategory) -> list[str]:
        return [r for r, (c, _) in self.per_rule.items() if c == category]

    def counts(self) -> dict[CheckCategory, int]:
        return {c: len(self.ids(c)) for c in CATEGORIES}

    def categories(self) -> dict[str, CheckCategory]:
        return {r: c for r, (c, _) in self.per_rule.items()}

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "check",
            "activity_id": self.activity_id,
            "tool": self.tool,
            "blacklisted": list(self.blacklisted),
            "failure": self.failure,
            "rules": {r: {"category": c.value, "detail": d} for r, (c, d) in self.per_rule.items()},
        }


def registry_value_satisfies(value: TypedAction, a: WindowsRegistry) -> bool:
    if value.value_type != a.action.value_type:
        return False
    if value == a.action:
        return True
    if a.constraint is not None and value.value_type == "DWORD":
        return a.constraint.admits(int(value.payload))
    return False


def parse_format_list(text: str) -> list[dict[str, str]]:
    """Parse ``Key : Value`` records separated by blank lines.

    Raises ``ValueError`` on a non-blank line without a colon.
    """
    records: list[dict[str, str]] = []
    current: dict[str, str] = {}
    for line in text.splitlines():
        if not line.strip():
            if current:
                records.append(current)
                current = {}
            continue
        key, sep, value = line.partition(":")
        if not sep or not key.strip():
            raise ValueError(f"not a 'Key : Value' line: {line!r}")
        current[key.strip()] = value.strip()
    if current:
        records.append(current)
    return records


def _check_registry(a: WindowsRegistry, target: TargetState) -> tuple[CheckCategory, str]:
    value = target.read_value(*a.triple)
    where = f"{a.config}\\{a.registry_key}\\{a.value_name}"
    if value is None:
        return CheckCategory.EMPTY, f"{where} absent"
    if registry_value_satisfies(value, a):
        return CheckCategory.COMPLIANT, f"{where} = {format_action(value)}"
    return CheckCategory.NON_COMPLIANT, f"{where} = {format_action(value)}, expected {format_action(a.action)}"


def _check_script(a: Script, target: TargetState) -> tuple[CheckCategory, str]:
    if a.expected.output_processor != "Format-List":
        return CheckCategory.UNKNOWN, f"unsupported output processor {a.expected.output_processor!r}"
    try:
        records = parse_format_list(target.run_script(a.script))
    except (ScriptError, UnknownScript) as exc:
        return CheckCategory.UNKNOWN, f"script failed: {exc}"
    except ValueError as exc:
        return CheckCategory.UNKNOWN, f"unparsable script output: {exc}"
    key, want = a.expected.key, a.expected.equal_to
    bad = [r.get(key) for r in records if r.get(key) != want]
    if bad:
        return CheckCategory.NON_COMPLIANT, f"{len(bad)} of {len(records)} items have {key} != {want!r}"
    return CheckCategory.COMPLIANT, f"{len(records)} items with {key} = {want!r}"


def check_entry(entry: RulepackEntry, target: TargetState) -> tuple[CheckCategory, str]:
    """Categorize one rule. ``ConnectionLost`` propagates to the caller."""
    if entry.no_automation:
        return CheckCategory.UNKNOWN, "rule has no automation"
    results = []
    for a in entry.automations:
        if isinstance(a, WindowsRegistry):
            results.append(_check_registry(a, target))
        else:
            results.append(_check_script(a, target))
    category = _worst(c for c, _ in results)
    return category, "; ".join(d for _, d in results)


def check_all(rp: Rulepack, target: TargetState, blacklist: Iterable[str] = (),
              activity_id: str = "check") -> CheckRun:
    bl = set(blacklist)
    run = CheckRun(activity_id, blacklisted=[r for r in rp.rule_ids if r in bl])
    lost = False
    for entry in rp.entries:
        if entry.rule_id in bl:
            continue
        if lost:
            run.per_rule[entry.rule_id] = (CheckCategory.UNKNOWN, "connection lost")
            continue
        try:
            run.per_rule[entry.rule_id] = check_entry(entry, target)
        except ConnectionLost as exc:
            lost = True
            run.failure = str(exc)
            run.per_rule[entry.rule_id] = (CheckCategory.UNKNOWN, "connection lost")
    return run


# -- apply ------------------------------------------------------------------

AFTER_BLACKLIST = "after_blacklist"


class NotAppliedReason(str, Enum):
    BLACKLISTED = "blacklisted"
    SKIPPED_BEFORE_START = "skipped_before_start"
    NOT_IMPLEMENTABLE = "not_implementable"
    ABORTED = "aborted"


@dataclass(frozen=True)
class ApplyMode:
    kind: str = "bulk"
    start_at: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("bulk", "one_by_one"):
            raise ValueError(f"apply mode must be bulk or one_by_one, got {self.kind!r}")
        if self.start_at is not None and self.kind != "one_by_one":
            raise ValueError("start_at requires one_by_one mode")


Backup = list[tuple[Triple, "TypedAction | None"]]


@dataclass
class ApplyRun:
    activity_id: str
    applied: list[str] = field(default_factory=list)
    not_applied: dict[str, NotAppliedReason] = field(default_factory=dict)
    backups: dict[str, Backup] = field(default_factory=dict)
    failure: dict[str, str] | None = None

    @property
    def failed(self) -> bool:
        return self.failure is not None

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "apply",
            "activity_id": self.activity_id,
            "applied": list(self.applied),
            "not_applied": {r: reason.value for r, reason in self.not_applied.items()},
            "backups": {
                r: [{"config": t[0], "key": t[1], "name": t[2],
                     "previous": None if prev is None else format_action(prev)} for t, prev in b]
                for r, b in self.backups.items()
            },
            "failure": self.failure,
        }


def _start_index(rp: Rulepack, blacklist: set[str], mode: ApplyMode) -> int:
    if mode.start_at is None:
        return 0
    ids = rp.rule_ids
    if mode.start_at == AFTER_BLACKLIST:
        positions = [i for i, r in enumerate(ids) if r in blacklist]
        return positions[-1] + 1 if positions else 0
    if mode.start_at not in ids:
        raise ValueError(f"start_at rule {mode.start_at!r} is not in the rulepack")
    return ids.index(mode.start_at)


def apply_all(rp: Rulepack, target: TargetState, blacklist: Iterable[str] = (),
              mode: ApplyMode = ApplyMode(), activity_id: str = "apply") -> ApplyRun:
    """Write every registry automation, recording the previous values.

    In ``one_by_one`` mode the target is probed after each rule so that a
    lost connection is attributed to the rule that caused it; ``bulk`` only
    notices on the next write (or the final probe).
    """
    bl = set(blacklist)
    run = ApplyRun(activity_id)
    start = _start_index(rp, bl, mode)
    last_writer: str | None = None
    aborted = False

    def lose(exc: ConnectionLost) -> None:
        nonlocal aborted
        aborted = True
        run.failure = {"rule_id": last_writer or "", "message": str(exc)}

    for i, entry in enumerate(rp.entries):
        rid = entry.rule_id
        if rid in bl:
            run.not_applied[rid] = NotAppliedReason.BLACKLISTED
            continue
        if aborted:
            run.not_applied[rid] = NotAppliedReason.ABORTED
            continue
        if i < start:
            run.not_applied[rid] = NotAppliedReason.SKIPPED_BEFORE_START
            continue
        registry = entry.registry_automations
        if not registry:
            run.not_applied[rid] = NotAppliedReason.NOT_IMPLEMENTABLE
            continue
        backup: Backup = []
        try:
            for a in registry:
                previous = target.write_value(*a.triple, a.action)
                backup.append((a.triple, previous))
                last_writer = rid
        except ConnectionLost as exc:
            lose(exc)
        if backup:
            run.backups[rid] = backup
        if aborted:
            run.not_applied[rid] = NotAppliedReason.ABORTED
            continue
        run.applied.append(rid)
        if mode.kind == "one_by_one":
            try:
                target.ping()
            except ConnectionLost as exc:
                lose(exc)
    if not aborted and mode.kind == "bulk" and last_writer is not None:
        try:
            target.ping()
        except ConnectionLost as exc:
            lose(exc)
    return run


# -- revert -----------------------------------------------------------------

class NotRevertedReason(str, Enum):
    NO_BACKUP = "no_backup"
    ABORTED = "aborted"


@dataclass
class RevertRun:
    activity_id: str
    reverted: list[str] = field(default_factory=list)
    not_reverted: dict[str, NotRevertedReason] = field(default_factory=dict)
    failure: str | None = None

    @property
    def failed(self) -> bool:
        return self.failure is not None

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": "revert",
            "activity_id": self.activity_id,
            "reverted": list(self.reverted),
            "not_reverted": {r: reason.value for r, reason in self.not_reverted.items()},
            "failure": self.failure,
        }


def merge_backups(runs: Iterable[Mapping[str, Backup]]) -> dict[str, Backup]:
    """Concatenate backups of consecutive apply runs, oldest first."""
    merged: dict[str, Backup] = {}
    for backups in runs:
        for rid, b in backups.items():
            merged.setdefault(rid, []).extend(b)
    return merged


def revert_all(rp: Rulepack, target: TargetState, backups: Mapping[str, Backup],
               activity_id: str = "revert") -> RevertRun:
    """Undo backed-up writes, latest first, so overlapping writes unwind correctly."""
    run = RevertRun(activity_id)
    order = rp.rule_ids + [r for r in backups if r not in set(rp.rule_ids)]
    done: set[str] = set()
    aborted: set[str] = set()
    lost = False
    for rid in reversed(order):
        if rid not in backups:
            continue
        if lost:
            aborted.add(rid)
            continue
        try:
            for triple, previous in reversed(backups[rid]):
                if previous is None:
                    target.delete_value(*triple)
                else:
                    target.write_value(*triple, previous)
            done.add(rid)
        except ConnectionLost as exc:
            lost = True
            run.failure = str(exc)
            aborted.add(rid)
    for rid in order:
        if rid in done:
            run.reverted.append(rid)
        elif rid in aborted:
            run.not_reverted[rid] = NotRevertedReason.ABORTED
        else:
            run.not_reverted[rid] = NotRevertedReason.NO_BACKUP
    return run
