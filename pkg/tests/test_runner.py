from __future__ import annotations

import copy
import json

import pytest
import yaml

from scapolite_ci.errors import BundleError, UnknownProfile
from scapolite_ci.runner import (
    FAILURE_GLYPH,
    build_staging_bundle,
    exit_code,
    render_difference,
    render_summary,
    report_from_dict,
    run_all,
    update_spec,
)
from scapolite_ci.target import TargetFixture
from scapolite_ci.testspec import SPEC_FILENAME, KeyDiff, Status, emit_test_spec, parse_test_spec

from conftest import GUIDE_DIR, SPECS_DIR, TARGETS_DIR


@pytest.fixture
def golden():
    return parse_test_spec((GUIDE_DIR / SPEC_FILENAME).read_text())


def clean_target(_name):
    return TargetFixture.load(TARGETS_DIR / "clean.yml").create()


def test_golden_spec_passes(golden, rulepack_for):
    report = run_all(golden, rulepack_for, clean_target)
    assert report.verdict() == "OK" and report.all_pass and exit_code(report) == 0
    assert update_spec(golden, report) == golden


def test_count_only_difference_has_no_id_lines():
    diff = KeyDiff("compliant_checks", Status.DEGRADATION, 75, 80)
    assert render_difference(diff) == [
        "DEGRADATION - Validation failed, DIFFERENT numbers (expected 75, found 80) (IMPROVEMENT: 'none')!"]
    assert render_difference(KeyDiff("k", Status.PASS, 1, 1)) == []


def test_improvement_directive_is_rendered():
    diff = KeyDiff("compliant_checks", Status.IMPROVEMENT, 75, 80)
    assert render_difference(diff, "rise")[0].endswith("(IMPROVEMENT: 'rise')!")


def _set_expected(spec, testrun, activity, key, value, improvement=None):
    v = spec.testruns[testrun].activities[activity].validations[0]
    v.expected[key] = value
    v.improvement = improvement


@pytest.mark.parametrize("expected, improvement, verdict, code", [
    (3, "rise", "IMPROVED", 0),
    (3, None, "DEGRADED", 1),
])
def test_verdicts(golden, rulepack_for, expected, improvement, verdict, code):
    spec = copy.deepcopy(golden)
    _set_expected(spec, 0, 0, "compliant_checks", expected, improvement)
    report = run_all(spec, rulepack_for, clean_target)
    assert report.verdict() == verdict and exit_code(report) == code
    assert render_summary(report).endswith(f"verdict: {verdict}\n")


def test_same_size_different_ids_is_critical(golden, rulepack_for):
    spec = copy.deepcopy(golden)
    v = spec.testruns[0].activities[2].validations[1]
    v.check_ids = ["R2_3_1_1"]
    report = run_all(spec, rulepack_for, clean_target)
    assert report.verdict() == "CRITICAL" and exit_code(report) == 3


def test_update_spec_adopts_actuals(golden, rulepack_for):
    spec = copy.deepcopy(golden)
    _set_expected(spec, 0, 0, "compliant_checks", 80)
    updated = update_spec(spec, run_all(spec, rulepack_for, clean_target))
    assert updated.testruns[0].activities[0].validations[0].expected["compliant_checks"] == 4
    assert updated == golden
    assert spec.testruns[0].activities[0].validations[0].expected["compliant_checks"] == 80


def test_disruptor_failure_is_isolated_to_its_testrun(golden, rulepack_for):
    fixture = TargetFixture.load(TARGETS_DIR / "disruptor.yml")
    report = run_all(golden, rulepack_for, fixture.create)
    full, level1 = report.testruns
    apply = full.activities[1]
    assert apply.failed and apply.failure_rule == "R18_9_97_2_3"
    # level1 gets a fresh, connected target for its own initial check
    assert level1.activities[0].outcomes[0].status == Status.PASS
    assert level1.activities[1].failure_rule == "R18_9_97_2_3"
    assert report.verdict() == "FAILED" and exit_code(report) == 3
    summary = render_summary(report)
    assert f"{FAILURE_GLYPH} apply_all [ps_scripts/apply_all] FAILED (attributed to R18_9_97_2_3)" in summary


def test_clean_testrun_unaffected_by_disrupted_sibling(golden, rulepack_for):
    data = yaml.safe_load((TARGETS_DIR / "clean.yml").read_text())
    data["testruns"] = {"full_guide": yaml.safe_load((TARGETS_DIR / "disruptor.yml").read_text())}
    fixture = TargetFixture(data)
    report = run_all(golden, rulepack_for, fixture.create)
    full, level1 = report.testruns
    assert full.activities[1].failed
    assert not any(a.failed for a in level1.activities)
    assert all(o.status == Status.PASS for a in level1.activities for o in a.outcomes)


def test_parallel_matches_sequential(golden, rulepack_for):
    a = run_all(golden, rulepack_for, clean_target)
    b = run_all(golden, rulepack_for, clean_target, max_workers=4)
    assert a.testruns == b.testruns and a.raw == b.raw


def test_unknown_profile_fails_testrun(golden, rulepack_for):
    spec = copy.deepcopy(golden)
    spec.testruns[1].testrun_ps_profile = "missing"
    report = run_all(spec, rulepack_for, clean_target)
    broken = report.testruns[1]
    assert "missing" in broken.failure and not any(a.ran for a in broken.activities)
    assert report.testruns[0].failure is None
    assert report.verdict() == "FAILED"
    with pytest.raises(UnknownProfile):
        rulepack_for("missing")


def test_skipped_testruns_never_build_targets(golden, rulepack_for):
    def boom(_name):
        raise AssertionError("target requested")
    report = run_all(golden, rulepack_for, boom, execute=False)
    assert all(tr.skipped for tr in report.testruns)
    assert report.verdict() == "OK"
    assert "skipped, dynamic tests not requested" in render_summary(report)
    assert update_spec(golden, report) == golden


def test_zero_testrun_spec(rulepack_for):
    spec = parse_test_spec("testruns: []\n")
    report = run_all(spec, rulepack_for, clean_target)
    assert report.verdict() == "OK" and render_summary(report) == "verdict: OK\n"
    files = build_staging_bundle(spec, report).files()
    assert not any(p.startswith("raw/") for p in files)


def test_unfilled_spec_gets_filled(rulepack_for):
    spec = parse_test_spec((SPECS_DIR / "first_run.yml").read_text())
    report = run_all(spec, rulepack_for, clean_target)
    assert "○" in render_summary(report)
    filled = update_spec(spec, report)
    again = run_all(filled, rulepack_for, clean_target)
    assert again.all_pass
    assert update_spec(filled, again) == filled


def test_bundle_contents_and_determinism(golden, rulepack_for):
    report = run_all(golden, rulepack_for, clean_target)
    first = build_staging_bundle(golden, report).files()
    second = build_staging_bundle(golden, report).files()
    assert first == second
    assert {"detailed.log", "deviations.txt", SPEC_FILENAME, "summary.txt", "report.json"} <= set(first)
    assert "raw/static/validate_json_file.json" in first
    assert "raw/01_full_guide/apply_all.json" in first
    assert first["deviations.txt"] == b""
    assert first[SPEC_FILENAME].decode() == emit_test_spec(golden)
    # independent runs differ only in their timestamps
    other = build_staging_bundle(golden, run_all(golden, rulepack_for, clean_target)).files()
    assert {k for k in first if first[k] != other[k]} <= {"report.json"}


def test_bundle_refuses_missing_raw_results(golden, rulepack_for):
    report = run_all(golden, rulepack_for, clean_target)
    raw = dict(report.raw)
    raw.pop("01_full_guide/revert_all.json")
    with pytest.raises(BundleError):
        build_staging_bundle(golden, report, raw)


def test_report_round_trips_through_json(golden, rulepack_for):
    spec = copy.deepcopy(golden)
    _set_expected(spec, 0, 0, "compliant_checks", 3)
    report = run_all(spec, rulepack_for, clean_target)
    again = report_from_dict(json.loads(json.dumps(report.to_dict())))
    assert again == report
    assert render_summary(again) == render_summary(report)
