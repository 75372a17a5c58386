"""Command-line entry point: ``scapolite-ci generate|test|report``.

Exit codes: ``generate`` and ``report`` return 0 or 2 (bad input). ``test``
returns 0 when everything passed or improved, 1 on degradations, 3 on
critical deviations or failed activities, and 2 on bad input.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .automation import PolicyCatalog, load_policy_catalog
from .errors import ScapoliteError
from .guide import Guide, load_guide
from .ovalgen import emit_oval
from .rulepack import WHOLE_GUIDE, Rulepack, build_rulepack, emit_rulepack
from .runner import build_staging_bundle, exit_code, render_deviations, render_summary, report_from_dict, run_all
from .target import TargetFixture
from .testspec import SPEC_FILENAME, UPDATED_SPEC_FILENAME, emit_test_spec, parse_test_spec

EXIT_OK, EXIT_DEGRADED, EXIT_USAGE, EXIT_CRITICAL = 0, 1, 2, 3
ENV_EXECUTE = "EXECUTE_TESTS"
DEFAULT_OUT = "scapolite-staging"


@dataclass
class CliConfig:
    guide_dir: Path | None = None
    catalog_path: Path | None = None
    spec_path: Path | None = None
    out_dir: Path = Path(DEFAULT_OUT)
    execute_tests: bool = False
    update_spec: bool = False
    target_fixture: Path | None = None
    oval_layout: str = "nested"

    @property
    def resolved_spec_path(self) -> Path | None:
        if self.spec_path is not None:
            return self.spec_path
        return self.guide_dir / SPEC_FILENAME if self.guide_dir is not None else None


def execute_requested(flag: bool | None, environ=None) -> bool:
    """An explicit flag wins; otherwise EXECUTE_TESTS must be exactly "true"."""
    if flag is not None:
        return flag
    environ = os.environ if environ is None else environ
    return environ.get(ENV_EXECUTE) == "true"


def _error(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return EXIT_USAGE


def _load_inputs(cfg: CliConfig) -> tuple[Guide, PolicyCatalog]:
    if cfg.guide_dir is None or cfg.catalog_path is None:
        raise ScapoliteError("--guide and --catalog are required")
    if not cfg.catalog_path.is_file():
        raise ScapoliteError(f"policy catalog {cfg.catalog_path} not found")
    catalog = load_policy_catalog(cfg.catalog_path.read_text(encoding="utf-8"))
    guide = load_guide(cfg.guide_dir)
    if not guide.rules:
        raise ScapoliteError(f"guide {cfg.guide_dir} contains no rules")
    return guide, catalog


def cmd_generate(cfg: CliConfig) -> int:
    try:
        guide, catalog = _load_inputs(cfg)
        packs = [build_rulepack(guide, pid, catalog) for pid in guide.profiles]
    except ScapoliteError as exc:
        return _error(str(exc))
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    for rp in packs:
        (cfg.out_dir / f"rulepack_{rp.profile_id}.json").write_bytes(emit_rulepack(rp))
        (cfg.out_dir / f"checks_{rp.profile_id}.oval.xml").write_bytes(emit_oval(rp, cfg.oval_layout))
        print(f"profile {rp.profile_id}: {len(rp)} rules")
    return EXIT_OK


def cmd_test(cfg: CliConfig) -> int:
    spec_path = cfg.resolved_spec_path
    try:
        guide, catalog = _load_inputs(cfg)
        if spec_path is None or not spec_path.is_file():
            raise ScapoliteError(f"test specification {spec_path} not found")
        spec = parse_test_spec(spec_path.read_text(encoding="utf-8"))
        fixture = None
        if cfg.execute_tests:
            # only touched when dynamic tests run, so static runs create no targets
            if cfg.target_fixture is None:
                raise ScapoliteError("--target-fixture is required to execute dynamic tests")
            fixture = TargetFixture.load(cfg.target_fixture)
    except ScapoliteError as exc:
        return _error(str(exc))

    cache: dict[str | None, Rulepack] = {}

    def rulepack_for(profile_id: str | None) -> Rulepack:
        key = None if profile_id in (None, WHOLE_GUIDE) else profile_id
        if key not in cache:
            cache[key] = build_rulepack(guide, key, catalog)
        return cache[key]

    try:
        report = run_all(spec, rulepack_for, fixture.create if fixture else None, execute=cfg.execute_tests)
    except ScapoliteError as exc:
        return _error(str(exc))
    bundle = build_staging_bundle(spec, report)
    bundle.write(cfg.out_dir)
    if cfg.update_spec:
        spec_path.with_name(UPDATED_SPEC_FILENAME).write_text(emit_test_spec(bundle.updated_spec), encoding="utf-8")
    sys.stdout.write(bundle.summary)
    return exit_code(report)


def cmd_report(cfg: CliConfig) -> int:
    path = cfg.out_dir / "report.json"
    if not path.is_file():
        return _error(f"no staging bundle at {cfg.out_dir}")
    try:
        report = report_from_dict(json.loads(path.read_text(encoding="utf-8")))
    except (ValueError, KeyError, TypeError) as exc:
        return _error(f"unreadable report in {cfg.out_dir}: {exc}")
    sys.stdout.write(render_summary(report))
    deviations = render_deviations(report)
    sys.stdout.write(deviations if deviations else "no deviations\n")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "test": cmd_test, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scapolite-ci", description="Compile Scapolite guides and test them.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--guide", type=Path, help="guide directory (rule documents and profiles.yml)")
    parser.add_argument("--catalog", type=Path, help="policy catalog YAML")
    parser.add_argument("--spec", type=Path, help=f"test specification (default <guide>/{SPEC_FILENAME})")
    parser.add_argument("--out", type=Path, default=Path(DEFAULT_OUT), help="output or bundle directory")
    parser.add_argument("--execute-tests", action=argparse.BooleanOptionalAction, default=None,
                        help=f"run dynamic testruns (default: ${ENV_EXECUTE} == 'true')")
    parser.add_argument("--update-spec", action="store_true",
                        help=f"write {UPDATED_SPEC_FILENAME} next to the test specification")
    parser.add_argument("--target-fixture", type=Path, help="target fixture YAML for dynamic tests")
    parser.add_argument("--oval-layout", choices=("nested", "flat"), default="nested")
    return parser


def config_from_args(args: argparse.Namespace, environ=None) -> CliConfig:
    return CliConfig(
        guide_dir=args.guide,
        catalog_path=args.catalog,
        spec_path=args.spec,
        out_dir=args.out,
        execute_tests=execute_requested(args.execute_tests, environ),
        update_spec=args.update_spec,
        target_fixture=args.target_fixture,
        oval_layout=args.oval_layout,
    )


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return COMMANDS[args.command](config_from_args(args))


if __name__ == "__main__":
    sys.exit(main())
