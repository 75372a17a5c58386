"""Run a test specification end to end and report on it.

Each testrun gets a fresh target from the factory, runs its activities in
order and drops the target afterwards. Static activities run once, before
any testrun, against the whole-guide rulepack. Reports are assembled in
spec order whatever the scheduling, so output is deterministic.
"""

from __future__ import annotations

import copy
import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable

from .errors import BundleError, ProfileResolutionError, ScapoliteError
from .executor import ApplyMode, ApplyRun, CheckRun, RevertRun, apply_all, check_all, merge_backups, revert_all
from .ovaleval import oval_check_run, parse_oval
from .ovalgen import emit_oval
from .rulepack import Rulepack, analyze_rulepack
from .testspec import (
    CISCAT,
    SPEC_FILENAME,
    Activity,
    ActivityResult,
    KeyDiff,
    Status,
    TestSpec,
    Testrun,
    ValidationOutcome,
    compute_outcome,
    emit_test_spec,
    result_counts,
    update_validation,
    worst_status,
)

RulepackFactory = Callable[["str | None"], Rulepack]
TargetFactory = Callable[[str], Any]

GLYPHS = {
    Status.PASS: "✓",
    Status.IMPROVEMENT: "↑",
    Status.DEGRADATION: "↓",
    Status.CRITICAL: "✗",
    Status.UNFILLED: "○",
}
FAILURE_GLYPH = "⚡"


# -- report model -----------------------------------------------------------

@dataclass
class ActivityReport:
    activity_id: str
    type: str
    sub_type: str | None = None
    ran: bool = True
    failure: str | None = None
    failure_rule: str | None = None
    counts: dict[str, int] = field(default_factory=dict)
    outcomes: list[ValidationOutcome] = field(default_factory=list)

    @property
    def status(self) -> Status:
        return worst_status(o.status for o in self.outcomes)

    @property
    def failed(self) -> bool:
        return self.failure is not None


@dataclass
class TestrunReport:
    __test__ = False

    name: str
    profile: str | None
    skipped: bool = False
    failure: str | None = None
    activities: list[ActivityReport] = field(default_factory=list)

    @property
    def slug(self) -> str:
        return re.sub(r"[^A-Za-z0-9._-]+", "_", self.name).strip("_") or "testrun"


@dataclass
class TestReport:
    __test__ = False

    testruns: list[TestrunReport] = field(default_factory=list)
    static: list[ActivityReport] = field(default_factory=list)
    started: str = ""
    finished: str = ""
    # raw activity results keyed by their path below raw/; not part of to_dict
    raw: dict[str, dict[str, Any]] = field(default_factory=dict, repr=False, compare=False)

    def activity_reports(self) -> list[ActivityReport]:
        out = list(self.static)
        for tr in self.testruns:
            out.extend(tr.activities)
        return out

    def outcomes(self) -> list[ValidationOutcome]:
        return [o for a in self.activity_reports() for o in a.outcomes]

    @property
    def has_failures(self) -> bool:
        return any(tr.failure for tr in self.testruns) or any(a.failed for a in self.activity_reports())

    @property
    def all_pass(self) -> bool:
        return not self.has_failures and all(o.status == Status.PASS for o in self.outcomes())

    def verdict(self) -> str:
        if self.has_failures:
            return "FAILED"
        status = worst_status(o.status for o in self.outcomes())
        return {Status.CRITICAL: "CRITICAL", Status.DEGRADATION: "DEGRADED",
                Status.IMPROVEMENT: "IMPROVED"}.get(status, "OK")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("raw")
        return d


def _outcome_from_dict(d: dict[str, Any]) -> ValidationOutcome:
    diffs = [KeyDiff(**{**k, "status": Status(k["status"])}) for k in d.get("diffs", [])]
    return ValidationOutcome(d["sub_type"], Status(d["status"]), diffs, dict(d.get("actuals", {})),
                             d.get("improvement"), d.get("compare_with"), d.get("note"))


def _activity_from_dict(d: dict[str, Any]) -> ActivityReport:
    return ActivityReport(d["activity_id"], d["type"], d.get("sub_type"), d.get("ran", True),
                          d.get("failure"), d.get("failure_rule"), dict(d.get("counts", {})),
                          [_outcome_from_dict(o) for o in d.get("outcomes", [])])


def report_from_dict(d: dict[str, Any]) -> TestReport:
    testruns = [TestrunReport(t["name"], t.get("profile"), t.get("skipped", False), t.get("failure"),
                              [_activity_from_dict(a) for a in t.get("activities", [])])
                for t in d.get("testruns", [])]
    return TestReport(testruns, [_activity_from_dict(a) for a in d.get("static", [])],
                      d.get("started", ""), d.get("finished", ""))


# -- running ----------------------------------------------------------------

def _not_run(activity: Activity, note: str) -> list[ValidationOutcome]:
    return [ValidationOutcome(v.sub_type, Status.CRITICAL, improvement=v.improvement,
                              compare_with=v.compare_with, note=note) for v in activity.validations]


def _evaluate(activity: Activity, result: ActivityResult,
              earlier: dict[str, ActivityResult]) -> list[ValidationOutcome]:
    outcomes = []
    for v in activity.validations:
        try:
            outcomes.append(compute_outcome(v, result, earlier))
        except ScapoliteError as exc:
            outcomes.append(ValidationOutcome(v.sub_type, Status.CRITICAL, improvement=v.improvement,
                                              compare_with=v.compare_with, note=str(exc)))
    return outcomes


def _execute(activity: Activity, rp: Rulepack, target, backups: list) -> ActivityResult:
    blacklist = activity.blacklist_rules or []
    if activity.type == CISCAT:
        doc = parse_oval(emit_oval(rp))
        return oval_check_run(doc, target, rp.rule_ids, blacklist, activity.id)
    if activity.sub_type == "check_all":
        return check_all(rp, target, blacklist, activity.id)
    if activity.sub_type == "apply_all":
        mode = ApplyMode(activity.apply_mode or "bulk", activity.start_at)
        run = apply_all(rp, target, blacklist, mode, activity.id)
        backups.append(run.backups)
        return run
    run = revert_all(rp, target, merge_backups(backups), activity.id)
    backups.clear()
    return run


def _failure_of(result: ActivityResult) -> tuple[str | None, str | None]:
    if isinstance(result, ApplyRun) and result.failure:
        rule = result.failure["rule_id"] or None
        where = f" after applying {rule}" if rule else ""
        return f"connection lost{where}: {result.failure['message']}", rule
    if isinstance(result, (CheckRun, RevertRun)) and result.failure:
        return f"connection lost: {result.failure}", None
    return None, None


def run_testrun(tr: Testrun, rulepack_for: RulepackFactory, target_for: TargetFactory,
                raw_prefix: str = "") -> tuple[TestrunReport, dict[str, dict[str, Any]]]:
    report = TestrunReport(tr.name, tr.testrun_ps_profile)
    raw: dict[str, dict[str, Any]] = {}
    try:
        try:
            rp = rulepack_for(tr.testrun_ps_profile)
        except ScapoliteError as exc:
            raise ProfileResolutionError(f"cannot build rulepack for profile {tr.testrun_ps_profile!r}: {exc}") from exc
    except ProfileResolutionError as exc:
        report.failure = str(exc)
        report.activities = [ActivityReport(a.id, a.type, a.sub_type, ran=False, outcomes=_not_run(a, str(exc)))
                             for a in tr.activities]
        return report, raw

    target = target_for(tr.name)
    results: dict[str, ActivityResult] = {}
    backups: list = []
    for activity in tr.activities:
        ar = ActivityReport(activity.id, activity.type, activity.sub_type)
        try:
            result = _execute(activity, rp, target, backups)
        except (ValueError, ScapoliteError) as exc:
            ar.ran = False
            ar.failure = f"activity could not run: {exc}"
            ar.outcomes = _not_run(activity, ar.failure)
            report.activities.append(ar)
            continue
        ar.failure, ar.failure_rule = _failure_of(result)
        ar.counts = result_counts(result)
        ar.outcomes = _evaluate(activity, result, results)
        results[activity.id] = result
        raw[f"{raw_prefix}{activity.id}.json"] = result.to_dict()
        report.activities.append(ar)
    del target  # the target of a testrun is never reused
    return report, raw


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def run_all(spec: TestSpec, rulepack_for: RulepackFactory, target_for: TargetFactory | None,
            execute: bool = True, max_workers: int = 1) -> TestReport:
    """Run static activities, then (if ``execute``) every testrun.

    ``target_for`` receives a testrun name and must return a fresh target.
    With ``execute=False`` testruns are reported as skipped and no target
    is ever requested.
    """
    report = TestReport(started=_now())

    if spec.static:
        rp = rulepack_for(None)
        findings = analyze_rulepack(rp)
        for activity in spec.static:
            ar = ActivityReport(activity.id, activity.type, activity.sub_type,
                                counts=findings.metric_counts(),
                                outcomes=_evaluate(activity, findings, {}))
            report.static.append(ar)
            report.raw[f"static/{activity.id}.json"] = findings.to_dict()

    if not execute or target_for is None:
        report.testruns = [TestrunReport(tr.name, tr.testrun_ps_profile, skipped=True) for tr in spec.testruns]
        report.finished = _now()
        return report

    prefixes = [f"{i + 1:02d}_{TestrunReport(tr.name, None).slug}/" for i, tr in enumerate(spec.testruns)]

    def job(i: int) -> tuple[TestrunReport, dict[str, dict[str, Any]]]:
        return run_testrun(spec.testruns[i], rulepack_for, target_for, prefixes[i])

    indices = range(len(spec.testruns))
    if max_workers > 1 and len(spec.testruns) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            done = list(pool.map(job, indices))
    else:
        done = [job(i) for i in indices]
    for tr_report, raw in done:
        report.testruns.append(tr_report)
        report.raw.update(raw)
    report.finished = _now()
    return report


# -- rendering --------------------------------------------------------------

def _id_set(ids: list[str]) -> str:
    return "{" + ", ".join(f"'{i}'" for i in ids) + "}"


def render_difference(diff: KeyDiff, improvement: str | None = None) -> list[str]:
    """Deviation report lines for one expectation key (none when it passed)."""
    if diff.status in (Status.PASS, Status.UNFILLED):
        return []
    directive = f"(IMPROVEMENT: '{improvement or 'none'}')!"
    exp_n, act_n = diff.expected_count, diff.actual_count
    if exp_n == act_n:
        header = f"{diff.status.value.upper()} - Validation failed, SAME numbers, but DIFFERENT IDs {directive}"
    else:
        header = (f"{diff.status.value.upper()} - Validation failed, DIFFERENT numbers "
                  f"(expected {exp_n}, found {act_n}) {directive}")
    lines = [header]
    if diff.is_ids:
        key = diff.key
        lines.append(f"    Expected and confirmed(found) '{key}' IDs: {_id_set(diff.confirmed or [])}")
        lines.append(f"    Expected '{key}' IDs, but not found: {_id_set(diff.expected_not_found or [])}")
        lines.append(f"    Found '{key}' IDs, but not expected: {_id_set(diff.found_not_expected or [])}")
    return lines


def _scopes(report: TestReport):
    for ar in report.static:
        yield "static", ar
    for tr in report.testruns:
        for ar in tr.activities:
            yield tr.name, ar


def render_deviations(report: TestReport) -> str:
    lines: list[str] = []
    for tr in report.testruns:
        if tr.failure:
            lines.append(f"[{tr.name}] FAILURE - {tr.failure}")
    for scope, ar in _scopes(report):
        if ar.failure:
            lines.append(f"[{scope}] {ar.activity_id}: FAILURE - {ar.failure}")
        for n, o in enumerate(ar.outcomes, 1):
            if o.status == Status.CRITICAL and not o.diffs:
                lines.append(f"[{scope}] {ar.activity_id} validation {n} ({o.sub_type}): not evaluated - {o.note}")
                continue
            for d in o.deviations:
                lines.append(f"[{scope}] {ar.activity_id} validation {n} ({o.sub_type}) '{d.key}':")
                lines.extend(render_difference(d, o.improvement))
    return "\n".join(lines) + "\n" if lines else ""


def _activity_line(ar: ActivityReport) -> str:
    label = ar.type if ar.sub_type is None else f"{ar.type}/{ar.sub_type}"
    if ar.failed:
        rule = f" (attributed to {ar.failure_rule})" if ar.failure_rule else ""
        return f"  {FAILURE_GLYPH} {ar.activity_id} [{label}] FAILED{rule}: {ar.failure}"
    status = ar.status if ar.outcomes else Status.PASS
    deltas = []
    for o in ar.outcomes:
        for d in o.deviations:
            deltas.append(f"{d.key} {d.expected_count}->{d.actual_count}")
        if o.status == Status.CRITICAL and not o.diffs:
            deltas.append(f"not evaluated: {o.note}")
    counts = " ".join(f"{k}={v}" for k, v in ar.counts.items())
    tail = f" | {'; '.join(deltas)}" if deltas else ""
    unfilled = " (unfilled)" if status == Status.UNFILLED else ""
    return f"  {GLYPHS[status]} {ar.activity_id} [{label}]{unfilled} {counts}{tail}".rstrip()


def render_summary(report: TestReport) -> str:
    lines = []
    if report.static:
        lines.append("static")
        lines.extend(_activity_line(ar) for ar in report.static)
    for tr in report.testruns:
        head = f"testrun {tr.name} (profile {tr.profile or 'whole guide'})"
        if tr.skipped:
            lines.append(f"{head}: skipped, dynamic tests not requested")
            continue
        if tr.failure:
            lines.append(f"{head}: {FAILURE_GLYPH} {tr.failure}")
        else:
            lines.append(head)
        lines.extend(_activity_line(ar) for ar in tr.activities)
    lines.append(f"verdict: {report.verdict()}")
    return "\n".join(lines) + "\n"


def render_detailed_log(report: TestReport) -> str:
    lines = []
    for scope, ar in _scopes(report):
        lines.append(f"[{scope}] activity {ar.activity_id} ({ar.type}{'/' + ar.sub_type if ar.sub_type else ''})")
        if not ar.ran:
            lines.append("  not run")
        if ar.failure:
            lines.append(f"  failure: {ar.failure}")
        for k, v in ar.counts.items():
            lines.append(f"  {k}: {v}")
        for n, o in enumerate(ar.outcomes, 1):
            extra = f" compare_with={o.compare_with}" if o.compare_with else ""
            lines.append(f"  validation {n} ({o.sub_type}{extra}): {o.status.value}")
            if o.note:
                lines.append(f"    note: {o.note}")
            for d in o.diffs:
                lines.append(f"    {d.key}: {d.status.value} expected={json.dumps(d.expected)} "
                             f"actual={json.dumps(d.actual)}")
    lines.append(f"verdict: {report.verdict()}")
    return "\n".join(lines) + "\n"


# -- spec update and bundle -------------------------------------------------

def update_spec(spec: TestSpec, report: TestReport) -> TestSpec:
    """Fill in actual values wherever a validation deviated or was unfilled.

    Passing validations are left untouched, so an all-pass report yields
    an identical spec.
    """
    updated = copy.deepcopy(spec)

    def patch(activities: list[Activity], reports: list[ActivityReport]) -> None:
        for activity, ar in zip(activities, reports):
            for i, (v, o) in enumerate(zip(activity.validations, ar.outcomes)):
                if o.actuals:
                    activity.validations[i] = update_validation(v, o)

    patch(updated.static, report.static)
    by_name = {tr.name: tr for tr in report.testruns}
    for tr in updated.testruns:
        tr_report = by_name.get(tr.name)
        if tr_report is not None and not tr_report.skipped:
            patch(tr.activities, tr_report.activities)
    return updated


@dataclass
class StagingBundle:
    detailed_log: str
    deviation_report: str
    updated_spec: TestSpec
    raw_results: dict[str, bytes]
    summary: str
    report_json: str

    def files(self) -> dict[str, bytes]:
        out = {
            "detailed.log": self.detailed_log.encode("utf-8"),
            "deviations.txt": self.deviation_report.encode("utf-8"),
            SPEC_FILENAME: emit_test_spec(self.updated_spec).encode("utf-8"),
            "summary.txt": self.summary.encode("utf-8"),
            "report.json": self.report_json.encode("utf-8"),
        }
        out.update({f"raw/{path}": data for path, data in self.raw_results.items()})
        return out

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        for rel, data in self.files().items():
            path = out / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(data)


def build_staging_bundle(spec: TestSpec, report: TestReport,
                         raw: dict[str, dict[str, Any]] | None = None) -> StagingBundle:
    raw = report.raw if raw is None else raw
    needed = [f"static/{ar.activity_id}.json" for ar in report.static]
    for i, tr in enumerate(report.testruns):
        prefix = f"{i + 1:02d}_{tr.slug}/"
        needed.extend(f"{prefix}{ar.activity_id}.json" for ar in tr.activities if ar.ran and not tr.skipped)
    missing = [p for p in needed if p not in raw]
    if missing:
        raise BundleError(f"raw results missing for {', '.join(missing)}; refusing to build the bundle")
    raw_bytes = {p: (json.dumps(raw[p], indent=2, ensure_ascii=False) + "\n").encode("utf-8") for p in needed}
    return StagingBundle(
        detailed_log=render_detailed_log(report),
        deviation_report=render_deviations(report),
        updated_spec=update_spec(spec, report),
        raw_results=raw_bytes,
        summary=render_summary(report),
        report_json=json.dumps(report.to_dict(), indent=2, ensure_ascii=False) + "\n",
    )


def exit_code(report: TestReport) -> int:
    return {"OK": 0, "IMPROVED": 0, "DEGRADED": 1}.get(report.verdict(), 3)
