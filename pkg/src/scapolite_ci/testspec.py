"""The test specification file (``.scapolite_tests.yml``) and validations.

Parsing is lossless: unknown keys are carried in ``extras`` and the
emitter writes fields in a fixed order, so a file written by
``emit_test_spec`` parses and re-emits byte-identically.

Validation results are computed from activity results (check, apply,
revert and static runs) and classified as pass, improvement,
degradation, critical or unfilled.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Mapping, Union

import yaml

from .errors import DanglingCompareWith, DuplicateActivityId, MalformedSpec
from .executor import ApplyRun, CheckCategory, CheckRun, RevertRun
from .rulepack import StaticFindings

SPEC_FILENAME = ".scapolite_tests.yml"
UPDATED_SPEC_FILENAME = ".scapolite_tests.updated.yml"

PS_SCRIPTS = "ps_scripts"
CISCAT = "ciscat"
STATIC_JSON = "examine_sfera_automation_json"
ACTIVITY_TYPES = (PS_SCRIPTS, CISCAT, STATIC_JSON)
PS_SUB_TYPES = ("check_all", "apply_all", "revert_all")
VALIDATION_TYPES = ("count", "by_id", "compare")
IMPROVEMENTS = ("rise", "fall")

CATEGORY_KEYS = {
    CheckCategory.COMPLIANT: "compliant_checks",
    CheckCategory.NON_COMPLIANT: "non_compliant_checks",
    CheckCategory.EMPTY: "empty_checks",
    CheckCategory.UNKNOWN: "unknown_checks",
}
VOCABULARY = {
    "check": ("blacklist_rules",) + tuple(CATEGORY_KEYS.values()),
    "apply": ("applied_automations", "not_applied_automations"),
    "revert": ("reverted_rules", "not_reverted_rules"),
    "static": ("no_automation", "same_setting"),
}
COMPARE_KEYS = tuple(f"rules_{what}_only_{side}"
                     for what in ("passed", "failed", "unknown") for side in ("here", "there"))


# -- model ------------------------------------------------------------------

@dataclass
class Validation:
    """One expectation block.

    ``expected`` is ``None`` for an empty block. The by_id shorthand
    ``result: <key>`` plus ``check_ids: [...]`` is kept as written.
    ``comment_in_expected`` records that the comment sat inside ``expected``.
    """

    sub_type: str
    expected: dict[str, Any] | None = None
    compare_with: str | None = None
    result: str | None = None
    check_ids: list[str] | None = None
    comment: str | None = None
    comment_in_expected: bool = False
    improvement: str | None = None
    extras: dict[str, Any] = field(default_factory=dict)

    @property
    def uses_result_form(self) -> bool:
        return self.result is not None

    def expectations(self) -> dict[str, Any]:
        """Expected values keyed by vocabulary key (``None`` = not filled in)."""
        if self.uses_result_form:
            return {self.result: self.check_ids}
        return dict(self.expected or {})

    @property
    def unfilled(self) -> bool:
        exp = self.expectations()
        return not exp or all(v is None for v in exp.values())


@dataclass
class Activity:
    id: str
    type: str
    sub_type: str | None = None
    blacklist_rules: list[str] | None = None
    apply_mode: str | None = None
    start_at: str | None = None
    validations: list[Validation] = field(default_factory=list)
    extras: dict[str, Any] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        """Which result vocabulary the activity produces."""
        if self.type == STATIC_JSON:
            return "static"
        if self.type == CISCAT:
            return "check"
        return {"check_all": "check", "apply_all": "apply", "revert_all": "revert"}[self.sub_type or ""]

    @property
    def tool(self) -> str:
        return "oval" if self.type == CISCAT else "native"


@dataclass
class Testrun:
    name: str
    testrun_ps_profile: str | None = None
    testrun_ciscat_profile: str | None = None
    testrun_benchmark_filename: str | None = None
    activities: list[Activity] = field(default_factory=list)
    extras: dict[str, Any] = field(default_factory=dict)

    def activity(self, activity_id: str) -> Activity:
        for a in self.activities:
            if a.id == activity_id:
                return a
        raise KeyError(activity_id)


@dataclass
class TestSpec:
    __test__ = False  # keeps pytest from collecting it

    os_family: Any = None
    os_image: Any = None
    os_image_version: Any = None
    ciscat_version: Any = None
    testruns: list[Testrun] = field(default_factory=list)
    static: list[Activity] = field(default_factory=list)
    extras: dict[str, Any] = field(default_factory=dict)


# -- parsing ----------------------------------------------------------------

def _mapping(raw: Any, what: str) -> dict[str, Any]:
    if not isinstance(raw, Mapping):
        raise MalformedSpec(f"{what} must be a mapping, got {type(raw).__name__}")
    return dict(raw)


def _id_list(raw: Any, what: str) -> list[str] | None:
    if raw is None:
        return None
    if not isinstance(raw, list) or not all(isinstance(x, (str, int, float)) for x in raw):
        raise MalformedSpec(f"{what} must be a list of rule ids")
    return [str(x) for x in raw]


def _opt_str(raw: Any, what: str) -> str | None:
    if raw is None:
        return None
    if isinstance(raw, (dict, list)):
        raise MalformedSpec(f"{what} must be a scalar")
    return str(raw)


def _check_value(key: str, value: Any, sub_type: str, where: str) -> Any:
    if value is None:
        return None
    if sub_type == "count":
        if isinstance(value, bool) or not isinstance(value, int):
            raise MalformedSpec(f"{where}: count expectation {key!r} must be an integer")
        return value
    return _id_list(value, f"{where}: {key}")


def _parse_validation(raw: Any, kind: str, where: str) -> Validation:
    data = _mapping(raw, where)
    sub_type = data.pop("sub_type", None)
    if sub_type not in VALIDATION_TYPES:
        raise MalformedSpec(f"{where}: sub_type must be one of {VALIDATION_TYPES}, got {sub_type!r}")
    v = Validation(sub_type)
    v.compare_with = _opt_str(data.pop("compare_with", None), f"{where}.compare_with")
    v.result = _opt_str(data.pop("result", None), f"{where}.result")
    v.check_ids = _id_list(data.pop("check_ids", None), f"{where}.check_ids")
    v.comment = _opt_str(data.pop("comment", None), f"{where}.comment")
    v.improvement = _opt_str(data.pop("improvement", None), f"{where}.improvement")
    raw_expected = data.pop("expected", None)
    v.extras = data

    if v.improvement is not None and v.improvement not in IMPROVEMENTS:
        raise MalformedSpec(f"{where}: improvement must be rise or fall, got {v.improvement!r}")
    if (v.compare_with is not None) != (sub_type == "compare"):
        raise MalformedSpec(f"{where}: compare_with is required for, and only allowed on, compare validations")
    if sub_type == "compare" and kind != "check":
        raise MalformedSpec(f"{where}: compare validations need a check activity")

    vocabulary = COMPARE_KEYS if sub_type == "compare" else VOCABULARY[kind]
    if raw_expected is not None:
        expected = _mapping(raw_expected, f"{where}.expected")
        if "comment" in expected:
            if v.comment is not None:
                raise MalformedSpec(f"{where}: comment given twice")
            v.comment = _opt_str(expected.pop("comment"), f"{where}.comment")
            v.comment_in_expected = True
        for key in expected:
            if key not in vocabulary:
                raise MalformedSpec(f"{where}: unknown expectation key {key!r} (allowed: {', '.join(vocabulary)})")
        v.expected = {k: _check_value(k, val, sub_type, where) for k, val in expected.items()}
    if v.result is not None or v.check_ids is not None:
        if sub_type != "by_id" or v.result is None:
            raise MalformedSpec(f"{where}: result/check_ids form is only valid for by_id validations")
        if v.result not in vocabulary:
            raise MalformedSpec(f"{where}: unknown result category {v.result!r}")
        if raw_expected is not None:
            raise MalformedSpec(f"{where}: use either result/check_ids or expected, not both")
    return v


def _parse_activity(raw: Any, where: str, static: bool) -> Activity:
    data = _mapping(raw, where)
    ident = _opt_str(data.pop("id", None), f"{where}.id")
    if not ident:
        raise MalformedSpec(f"{where}: activity needs an id")
    where = f"{where} ({ident})"
    a = Activity(ident, _opt_str(data.pop("type", None), f"{where}.type") or "")
    if a.type not in ACTIVITY_TYPES:
        raise MalformedSpec(f"{where}: type must be one of {ACTIVITY_TYPES}, got {a.type!r}")
    if static != (a.type == STATIC_JSON):
        raise MalformedSpec(f"{where}: {a.type} activities belong {'under testruns' if static else 'under static'}")
    a.sub_type = _opt_str(data.pop("sub_type", None), f"{where}.sub_type")
    if (a.type == PS_SCRIPTS) != (a.sub_type is not None):
        raise MalformedSpec(f"{where}: sub_type is required for, and only allowed on, ps_scripts activities")
    if a.sub_type is not None and a.sub_type not in PS_SUB_TYPES:
        raise MalformedSpec(f"{where}: sub_type must be one of {PS_SUB_TYPES}, got {a.sub_type!r}")
    a.blacklist_rules = _id_list(data.pop("blacklist_rules", None), f"{where}.blacklist_rules")
    a.apply_mode = _opt_str(data.pop("apply_mode", None), f"{where}.apply_mode")
    a.start_at = _opt_str(data.pop("start_at", None), f"{where}.start_at")
    if a.blacklist_rules is not None and a.kind not in ("check", "apply"):
        raise MalformedSpec(f"{where}: blacklist_rules only applies to check and apply activities")
    if (a.apply_mode is not None or a.start_at is not None) and a.kind != "apply":
        raise MalformedSpec(f"{where}: apply_mode/start_at only apply to apply_all activities")
    if a.apply_mode not in (None, "bulk", "one_by_one"):
        raise MalformedSpec(f"{where}: apply_mode must be bulk or one_by_one")
    if a.start_at is not None and a.apply_mode != "one_by_one":
        raise MalformedSpec(f"{where}: start_at requires apply_mode one_by_one")
    raw_validations = data.pop("validations", None) or []
    if not isinstance(raw_validations, list):
        raise MalformedSpec(f"{where}: validations must be a list")
    a.validations = [_parse_validation(v, a.kind, f"{where} validation {i + 1}")
                     for i, v in enumerate(raw_validations)]
    a.extras = data
    return a


def _check_activity_ids(activities: list[Activity], where: str) -> None:
    seen: dict[str, Activity] = {}
    for a in activities:
        if a.id in seen:
            raise DuplicateActivityId(f"{where}: duplicate activity id {a.id!r}")
        for v in a.validations:
            if v.compare_with is None:
                continue
            target = seen.get(v.compare_with)
            if target is None:
                raise DanglingCompareWith(
                    f"{where}: activity {a.id!r} compares with {v.compare_with!r}, which is not an earlier activity")
            if target.kind != "check":
                raise MalformedSpec(f"{where}: {a.id!r} compares with non-check activity {v.compare_with!r}")
        seen[a.id] = a


def parse_test_spec(text: str) -> TestSpec:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise MalformedSpec(f"test spec is not valid YAML: {exc}") from None
    data = _mapping(raw if raw is not None else {}, "test spec")
    spec = TestSpec(
        os_family=data.pop("os_family", None),
        os_image=data.pop("os_image", None),
        os_image_version=data.pop("os_image_version", None),
        ciscat_version=data.pop("ciscat_version", None),
    )
    raw_testruns = data.pop("testruns", None) or []
    raw_static = data.pop("static", None) or []
    spec.extras = data
    if not isinstance(raw_testruns, list) or not isinstance(raw_static, list):
        raise MalformedSpec("testruns and static must be lists")

    names: set[str] = set()
    for i, raw_tr in enumerate(raw_testruns):
        tr_data = _mapping(raw_tr, f"testrun {i + 1}")
        name = _opt_str(tr_data.pop("name", None), f"testrun {i + 1}.name")
        if not name:
            raise MalformedSpec(f"testrun {i + 1} needs a name")
        if name in names:
            raise MalformedSpec(f"duplicate testrun name {name!r}")
        names.add(name)
        tr = Testrun(
            name,
            _opt_str(tr_data.pop("testrun_ps_profile", None), f"{name}.testrun_ps_profile"),
            _opt_str(tr_data.pop("testrun_ciscat_profile", None), f"{name}.testrun_ciscat_profile"),
            _opt_str(tr_data.pop("testrun_benchmark_filename", None), f"{name}.testrun_benchmark_filename"),
        )
        raw_acts = tr_data.pop("activities", None) or []
        if not isinstance(raw_acts, list):
            raise MalformedSpec(f"testrun {name!r}: activities must be a list")
        tr.activities = [_parse_activity(a, f"testrun {name!r} activity {j + 1}", static=False)
                         for j, a in enumerate(raw_acts)]
        tr.extras = tr_data
        _check_activity_ids(tr.activities, f"testrun {name!r}")
        spec.testruns.append(tr)

    spec.static = [_parse_activity(a, f"static activity {j + 1}", static=True) for j, a in enumerate(raw_static)]
    _check_activity_ids(spec.static, "static")
    return spec


# -- emitting ---------------------------------------------------------------

class _SpecDumper(yaml.SafeDumper):
    pass


def _represent_none(dumper: yaml.SafeDumper, _value: None) -> yaml.Node:
    return dumper.represent_scalar("tag:yaml.org,2002:null", "")


def _represent_list(dumper: yaml.SafeDumper, value: list) -> yaml.Node:
    flow = all(not isinstance(x, (list, dict)) for x in value)
    return dumper.represent_sequence("tag:yaml.org,2002:seq", value, flow_style=flow)


_SpecDumper.add_representer(type(None), _represent_none)
_SpecDumper.add_representer(list, _represent_list)


def _put(out: dict[str, Any], key: str, value: Any) -> None:
    if value is not None:
        out[key] = value


def _validation_to_dict(v: Validation) -> dict[str, Any]:
    out: dict[str, Any] = {"sub_type": v.sub_type}
    _put(out, "compare_with", v.compare_with)
    _put(out, "result", v.result)
    if not v.comment_in_expected:
        _put(out, "comment", v.comment)
    _put(out, "improvement", v.improvement)
    if v.comment_in_expected or v.expected is not None:
        expected: dict[str, Any] = {}
        if v.comment_in_expected:
            expected["comment"] = v.comment
        expected.update(v.expected or {})
        out["expected"] = expected or None
    elif not v.uses_result_form:
        out["expected"] = None
    if v.uses_result_form:
        out["check_ids"] = v.check_ids
    out.update(v.extras)
    return out


def _activity_to_dict(a: Activity) -> dict[str, Any]:
    out: dict[str, Any] = {"id": a.id, "type": a.type}
    _put(out, "sub_type", a.sub_type)
    _put(out, "apply_mode", a.apply_mode)
    _put(out, "start_at", a.start_at)
    _put(out, "blacklist_rules", a.blacklist_rules)
    out.update(a.extras)
    out["validations"] = [_validation_to_dict(v) for v in a.validations]
    return out


def spec_to_dict(spec: TestSpec) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key in ("os_family", "os_image", "os_image_version", "ciscat_version"):
        _put(out, key, getattr(spec, key))
    out.update(spec.extras)
    testruns = []
    for tr in spec.testruns:
        t: dict[str, Any] = {"name": tr.name}
        _put(t, "testrun_ps_profile", tr.testrun_ps_profile)
        _put(t, "testrun_ciscat_profile", tr.testrun_ciscat_profile)
        _put(t, "testrun_benchmark_filename", tr.testrun_benchmark_filename)
        t.update(tr.extras)
        t["activities"] = [_activity_to_dict(a) for a in tr.activities]
        testruns.append(t)
    out["testruns"] = testruns
    out["static"] = [_activity_to_dict(a) for a in spec.static]
    return out


def emit_test_spec(spec: TestSpec) -> str:
    return yaml.dump(spec_to_dict(spec), Dumper=_SpecDumper, sort_keys=False,
                     default_flow_style=False, allow_unicode=True, width=10_000)


# -- activity results -------------------------------------------------------

ActivityResult = Union[CheckRun, ApplyRun, RevertRun, StaticFindings]


def result_ids(result: ActivityResult) -> dict[str, list[str]]:
    """Id lists per vocabulary key."""
    if isinstance(result, CheckRun):
        out = {"blacklist_rules": list(result.blacklisted)}
        out.update({key: result.ids(cat) for cat, key in CATEGORY_KEYS.items()})
        return out
    if isinstance(result, ApplyRun):
        return {"applied_automations": list(result.applied),
                "not_applied_automations": list(result.not_applied)}
    if isinstance(result, RevertRun):
        return {"reverted_rules": list(result.reverted), "not_reverted_rules": list(result.not_reverted)}
    return result.metric_ids()


def result_counts(result: ActivityResult) -> dict[str, int]:
    if isinstance(result, StaticFindings):
        return result.metric_counts()
    return {k: len(v) for k, v in result_ids(result).items()}


# -- outcomes ---------------------------------------------------------------

class Status(str, Enum):
    PASS = "pass"
    IMPROVEMENT = "improvement"
    DEGRADATION = "degradation"
    CRITICAL = "critical"
    UNFILLED = "unfilled"


# worst first
_SEVERITY = (Status.CRITICAL, Status.DEGRADATION, Status.IMPROVEMENT, Status.PASS, Status.UNFILLED)


def worst_status(statuses) -> Status:
    present = set(statuses)
    for s in _SEVERITY:
        if s in present:
            return s
    return Status.PASS


@dataclass
class KeyDiff:
    key: str
    status: Status
    expected: Any
    actual: Any
    confirmed: list[str] | None = None
    expected_not_found: list[str] | None = None
    found_not_expected: list[str] | None = None

    @property
    def is_ids(self) -> bool:
        return self.confirmed is not None

    @property
    def expected_count(self) -> int | None:
        if self.expected is None:
            return None
        return len(self.expected) if self.is_ids else self.expected

    @property
    def actual_count(self) -> int:
        return len(self.actual) if self.is_ids else self.actual


@dataclass
class ValidationOutcome:
    sub_type: str
    status: Status
    diffs: list[KeyDiff] = field(default_factory=list)
    actuals: dict[str, Any] = field(default_factory=dict)
    improvement: str | None = None
    compare_with: str | None = None
    note: str | None = None

    @property
    def deviations(self) -> list[KeyDiff]:
        return [d for d in self.diffs if d.status not in (Status.PASS, Status.UNFILLED)]


def _dedupe(ids) -> list[str]:
    out: list[str] = []
    for i in ids:
        if i not in out:
            out.append(i)
    return out


def classify_numbers(expected: int, actual: int, improvement: str | None) -> Status:
    if expected == actual:
        return Status.PASS
    if (improvement == "rise" and actual > expected) or (improvement == "fall" and actual < expected):
        return Status.IMPROVEMENT
    return Status.DEGRADATION


def classify_ids(expected: list[str], actual: list[str], improvement: str | None) -> Status:
    exp, act = set(expected), set(actual)
    if exp == act:
        return Status.PASS
    if len(exp) == len(act):
        return Status.CRITICAL
    return classify_numbers(len(exp), len(act), improvement)


def _count_diff(key: str, expected: int | None, actual: int, improvement: str | None) -> KeyDiff:
    if expected is None:
        return KeyDiff(key, Status.UNFILLED, None, actual)
    return KeyDiff(key, classify_numbers(expected, actual, improvement), expected, actual)


def _ids_diff(key: str, expected: list[str] | None, actual: list[str], improvement: str | None) -> KeyDiff:
    actual = _dedupe(actual)
    if expected is None:
        return KeyDiff(key, Status.UNFILLED, None, actual, [], [], [])
    expected = _dedupe(expected)
    act, exp = set(actual), set(expected)
    return KeyDiff(
        key, classify_ids(expected, actual, improvement), expected, actual,
        confirmed=[i for i in expected if i in act],
        expected_not_found=[i for i in expected if i not in act],
        found_not_expected=[i for i in actual if i not in exp],
    )


def _finish(v: Validation, diffs: list[KeyDiff], actuals: dict[str, Any]) -> ValidationOutcome:
    status = Status.UNFILLED if v.unfilled else worst_status(d.status for d in diffs if d.status != Status.UNFILLED)
    return ValidationOutcome(v.sub_type, status, diffs, actuals, v.improvement, v.compare_with)


def compute_count(v: Validation, result: ActivityResult) -> ValidationOutcome:
    actuals = result_counts(result)
    expected = v.expectations()
    keys = list(expected) if expected else list(actuals)
    diffs = [_count_diff(k, expected.get(k), actuals[k], v.improvement) for k in keys]
    return _finish(v, diffs, actuals)


def compute_by_id(v: Validation, result: ActivityResult) -> ValidationOutcome:
    actuals = result_ids(result)
    expected = v.expectations()
    keys = list(expected) if expected else list(actuals)
    diffs = [_ids_diff(k, expected.get(k), actuals[k], v.improvement) for k in keys]
    return _finish(v, diffs, actuals)


def compare_lists(here: Mapping[str, CheckCategory], there: Mapping[str, CheckCategory],
                  fold_empty: bool) -> dict[str, list[str]]:
    """The six ``rules_<what>_only_<side>`` lists; ``here`` order is kept for *_here."""

    def group(cat: CheckCategory) -> str | None:
        if cat == CheckCategory.COMPLIANT:
            return "passed"
        if cat == CheckCategory.NON_COMPLIANT:
            return "failed"
        if cat == CheckCategory.UNKNOWN or (fold_empty and cat == CheckCategory.EMPTY):
            return "unknown"
        return None

    def members(side: Mapping[str, CheckCategory], what: str) -> list[str]:
        return [r for r, c in side.items() if group(c) == what]

    out: dict[str, list[str]] = {}
    for what in ("passed", "failed", "unknown"):
        h, t = members(here, what), members(there, what)
        hs, ts = set(h), set(t)
        out[f"rules_{what}_only_here"] = [r for r in h if r not in ts]
        out[f"rules_{what}_only_there"] = [r for r in t if r not in hs]
    return out


def compute_compare(v: Validation, here: CheckRun, there: CheckRun) -> ValidationOutcome:
    # the external scanner has no empty category, so fold it into unknown
    # when comparing results of different tools
    fold = here.tool != there.tool
    actuals = compare_lists(here.categories(), there.categories(), fold)
    expected = v.expectations()
    keys = list(expected) if expected else list(COMPARE_KEYS)
    diffs = [_ids_diff(k, expected.get(k), actuals[k], v.improvement) for k in keys]
    outcome = _finish(v, diffs, actuals)
    if fold:
        outcome.note = "empty results folded into unknown for a cross-tool comparison"
    return outcome


def compute_outcome(v: Validation, result: ActivityResult,
                    earlier: Mapping[str, ActivityResult] | None = None) -> ValidationOutcome:
    if v.sub_type == "count":
        return compute_count(v, result)
    if v.sub_type == "by_id":
        return compute_by_id(v, result)
    there = (earlier or {}).get(v.compare_with or "")
    if not isinstance(result, CheckRun) or not isinstance(there, CheckRun):
        raise MalformedSpec(f"compare_with {v.compare_with!r} has no check result to compare against")
    return compute_compare(v, result, there)


def update_validation(v: Validation, outcome: ValidationOutcome) -> Validation:
    """Replace mismatched or unfilled expectations with the computed actuals."""
    if outcome.status == Status.PASS:
        return v
    if v.uses_result_form:
        return replace(v, check_ids=list(outcome.actuals[v.result]))
    if v.unfilled:
        keys = list(v.expected or {}) or list(outcome.actuals)
        return replace(v, expected={k: outcome.actuals[k] for k in keys})
    expected = dict(v.expected or {})
    for d in outcome.diffs:
        if d.status != Status.PASS:
            expected[d.key] = outcome.actuals[d.key]
    return replace(v, expected=expected)
