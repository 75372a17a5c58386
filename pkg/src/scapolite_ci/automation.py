"""Automation variants, registry actions, the policy catalog and the
policy-to-registry transformation.

Automations are plain frozen dataclasses. ``parse_automation`` and
``automation_to_dict`` convert between them and the mapping form used in
Scapolite front matter and in rulepacks.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Mapping, Union

import yaml

from .errors import (
    DuplicateUiPath,
    IncompleteMainSettingEncoding,
    MalformedAction,
    MalformedAutomation,
    MalformedCatalog,
    UnencodableValue,
    UnknownOption,
    UnknownPolicyPath,
)

WIN_GPO = "org.scapolite.implementation.win_gpo"
WINDOWS_REGISTRY = "org.scapolite.implementation.windows_registry"
COMPOUND = "org.scapolite.automation.compound"
SCRIPT = "org.scapolite.automation.script"

CONFIGS = ("Computer", "User")
VALUE_TYPES = ("DWORD", "SZ")
MAIN_SETTING = "main_setting"
DWORD_MAX = 0xFFFFFFFF

_DWORD_RE = re.compile(r"0|[1-9][0-9]*")


@dataclass(frozen=True)
class Constraint:
    min: int | None = None
    max: int | None = None

    def __post_init__(self) -> None:
        if self.min is None and self.max is None:
            raise MalformedAutomation("constraint needs at least one of min/max")
        for bound in (self.min, self.max):
            if bound is not None and (isinstance(bound, bool) or not isinstance(bound, int)):
                raise MalformedAutomation(f"constraint bound must be an integer, got {bound!r}")
        if self.min is not None and self.max is not None and self.min > self.max:
            raise MalformedAutomation(f"constraint min {self.min} exceeds max {self.max}")

    def admits(self, value: int) -> bool:
        if self.min is not None and value < self.min:
            return False
        if self.max is not None and value > self.max:
            return False
        return True

    def to_dict(self) -> dict[str, int]:
        out = {}
        if self.min is not None:
            out["min"] = self.min
        if self.max is not None:
            out["max"] = self.max
        return out

    @classmethod
    def from_dict(cls, data: Any) -> Constraint:
        if not isinstance(data, Mapping):
            raise MalformedAutomation(f"constraint must be a mapping, got {data!r}")
        unknown = set(data) - {"min", "max"}
        if unknown:
            raise MalformedAutomation(f"unknown constraint keys: {sorted(unknown)}")
        return cls(min=data.get("min"), max=data.get("max"))


@dataclass(frozen=True)
class TypedAction:
    """A typed registry value, written ``TYPE:payload`` (e.g. ``DWORD:15``)."""

    value_type: str
    payload: int | str

    def __post_init__(self) -> None:
        if self.value_type == "DWORD":
            if isinstance(self.payload, bool) or not isinstance(self.payload, int):
                raise MalformedAction(f"DWORD payload must be an integer, got {self.payload!r}")
            if not 0 <= self.payload <= DWORD_MAX:
                raise MalformedAction(f"DWORD payload out of range: {self.payload}")
        elif self.value_type == "SZ":
            if not isinstance(self.payload, str):
                raise MalformedAction(f"SZ payload must be a string, got {self.payload!r}")
        else:
            raise MalformedAction(f"unsupported value type {self.value_type!r}")

    def __str__(self) -> str:
        return format_action(self)


def parse_action(text: str) -> TypedAction:
    if not isinstance(text, str) or ":" not in text:
        raise MalformedAction(f"expected TYPE:payload, got {text!r}")
    value_type, payload = text.split(":", 1)
    if value_type == "DWORD":
        if not _DWORD_RE.fullmatch(payload):
            raise MalformedAction(f"bad DWORD payload in {text!r}")
        return TypedAction("DWORD", int(payload))
    if value_type == "SZ":
        return TypedAction("SZ", payload)
    raise MalformedAction(f"unsupported value type in {text!r}")


def format_action(action: TypedAction) -> str:
    return f"{action.value_type}:{action.payload}"


@dataclass(frozen=True)
class ExpectedOutput:
    key: str
    equal_to: str
    output_processor: str = "Format-List"

    def __post_init__(self) -> None:
        if self.output_processor != "Format-List":
            raise MalformedAutomation(f"unsupported output_processor {self.output_processor!r}")
        if not self.key or not self.equal_to:
            raise MalformedAutomation("expected.each_item needs non-empty key and equal_to")


@dataclass(frozen=True)
class WinGpo:
    ui_path: str
    value: Mapping[str, Any]
    constraints: Mapping[str, Constraint] = field(default_factory=dict)

    system = WIN_GPO

    def __post_init__(self) -> None:
        if MAIN_SETTING not in self.value:
            raise MalformedAutomation(f"win_gpo value for {self.ui_path!r} lacks main_setting")


@dataclass(frozen=True)
class WindowsRegistry:
    config: str
    registry_key: str
    value_name: str
    action: TypedAction
    constraint: Constraint | None = None

    system = WINDOWS_REGISTRY

    def __post_init__(self) -> None:
        if self.config not in CONFIGS:
            raise MalformedAutomation(f"config must be Computer or User, got {self.config!r}")
        if not self.registry_key or not self.value_name:
            raise MalformedAutomation("registry automation needs registry_key and value_name")
        if self.constraint is not None:
            if self.action.value_type != "DWORD":
                raise MalformedAutomation("constraints only apply to DWORD actions")
            # the prescribed value must itself be compliant
            if not self.constraint.admits(int(self.action.payload)):
                raise MalformedAutomation(
                    f"action {format_action(self.action)} violates its own constraint {self.constraint.to_dict()}")

    @property
    def triple(self) -> tuple[str, str, str]:
        return (self.config, self.registry_key, self.value_name)


@dataclass(frozen=True)
class Compound:
    automations: tuple[Automation, ...]

    system = COMPOUND

    def __post_init__(self) -> None:
        if not self.automations:
            raise MalformedAutomation("compound automation needs at least one child")


@dataclass(frozen=True)
class Script:
    script: str
    expected: ExpectedOutput

    system = SCRIPT


Automation = Union[WinGpo, WindowsRegistry, Compound, Script]
ConcreteAutomation = Union[WindowsRegistry, Script]


def _require(data: Mapping[str, Any], key: str, system: str) -> Any:
    if key not in data:
        raise MalformedAutomation(f"{system} automation lacks {key!r}")
    return data[key]


def _check_keys(data: Mapping[str, Any], allowed: set[str], system: str) -> None:
    unknown = set(data) - allowed - {"system"}
    if unknown:
        raise MalformedAutomation(f"{system} automation has unknown keys {sorted(unknown)}")


def parse_automation(data: Any, *, _depth: int = 0) -> Automation:
    if not isinstance(data, Mapping):
        raise MalformedAutomation(f"automation must be a mapping, got {data!r}")
    system = data.get("system")
    if system == WIN_GPO:
        _check_keys(data, {"ui_path", "value", "constraints"}, "win_gpo")
        value = dict(_require(data, "value", "win_gpo") or {})
        # constraints may also sit inside the value block
        raw_constraints = dict(data.get("constraints") or {})
        if "constraints" in value:
            raw_constraints.update(value.pop("constraints") or {})
        constraints = {str(k): Constraint.from_dict(v) for k, v in raw_constraints.items()}
        return WinGpo(str(_require(data, "ui_path", "win_gpo")), value, constraints)
    if system == WINDOWS_REGISTRY:
        _check_keys(data, {"config", "registry_key", "value_name", "action", "constraints"}, "windows_registry")
        constraint = data.get("constraints")
        return WindowsRegistry(
            config=str(data.get("config", "Computer")),
            registry_key=str(_require(data, "registry_key", "windows_registry")),
            value_name=str(_require(data, "value_name", "windows_registry")),
            action=parse_action(str(_require(data, "action", "windows_registry"))),
            constraint=Constraint.from_dict(constraint) if constraint is not None else None,
        )
    if system == COMPOUND:
        _check_keys(data, {"automations"}, "compound")
        if _depth > 0:
            raise MalformedAutomation("nested compound automations are not supported")
        children = _require(data, "automations", "compound")
        if not isinstance(children, list):
            raise MalformedAutomation("compound automations must be a list")
        return Compound(tuple(parse_automation(c, _depth=_depth + 1) for c in children))
    if system == SCRIPT:
        _check_keys(data, {"script", "expected"}, "script")
        expected = _require(data, "expected", "script")
        if not isinstance(expected, Mapping) or not isinstance(expected.get("each_item"), Mapping):
            raise MalformedAutomation("script expected block needs each_item")
        item = expected["each_item"]
        return Script(
            script=str(_require(data, "script", "script")),
            expected=ExpectedOutput(
                key=str(item.get("key", "")),
                equal_to=str(item.get("equal_to", "")),
                output_processor=str(expected.get("output_processor", "Format-List")),
            ),
        )
    raise MalformedAutomation(f"unknown automation system {system!r}")


def automation_to_dict(a: Automation) -> dict[str, Any]:
    if isinstance(a, WinGpo):
        out: dict[str, Any] = {"system": WIN_GPO, "ui_path": a.ui_path, "value": dict(a.value)}
        if a.constraints:
            out["constraints"] = {k: c.to_dict() for k, c in a.constraints.items()}
        return out
    if isinstance(a, WindowsRegistry):
        out = {
            "system": WINDOWS_REGISTRY,
            "config": a.config,
            "registry_key": a.registry_key,
            "value_name": a.value_name,
            "action": format_action(a.action),
        }
        if a.constraint is not None:
            out["constraints"] = a.constraint.to_dict()
        return out
    if isinstance(a, Compound):
        return {"system": COMPOUND, "automations": [automation_to_dict(c) for c in a.automations]}
    if isinstance(a, Script):
        return {
            "system": SCRIPT,
            "script": a.script,
            "expected": {
                "output_processor": a.expected.output_processor,
                "each_item": {"key": a.expected.key, "equal_to": a.expected.equal_to},
            },
        }
    raise TypeError(f"not an automation: {a!r}")


# -- policy catalog ---------------------------------------------------------

INTEGER_ENCODING = "integer"


@dataclass(frozen=True)
class SettingMap:
    """How one policy option (or ``main_setting``) lands in the registry.

    ``encoding`` is either a mapping from option value to action, or the
    string ``"integer"`` meaning the literal integer is written as a DWORD.
    """

    selector: str
    value_name: str
    encoding: Mapping[str, TypedAction] | str

    @property
    def is_integer(self) -> bool:
        return self.encoding == INTEGER_ENCODING

    def encode(self, value: Any) -> TypedAction:
        if self.is_integer:
            if isinstance(value, bool) or not isinstance(value, int):
                raise UnencodableValue(f"option {self.selector!r} expects an integer, got {value!r}")
            try:
                return TypedAction("DWORD", value)
            except MalformedAction as exc:
                raise UnencodableValue(f"option {self.selector!r}: {exc}") from None
        assert isinstance(self.encoding, Mapping)
        try:
            return self.encoding[str(value)]
        except KeyError:
            raise UnencodableValue(
                f"option {self.selector!r} has no encoding for {value!r}"
            ) from None


@dataclass(frozen=True)
class PolicyEntry:
    ui_path: str
    registry_key: str
    settings: tuple[SettingMap, ...]
    config: str = "Computer"

    def setting(self, selector: str) -> SettingMap | None:
        for s in self.settings:
            if s.selector == selector:
                return s
        return None


@dataclass(frozen=True)
class PolicyCatalog:
    entries: Mapping[str, PolicyEntry] = field(default_factory=dict)

    def __contains__(self, ui_path: str) -> bool:
        return ui_path in self.entries

    def __getitem__(self, ui_path: str) -> PolicyEntry:
        return self.entries[ui_path]


def _parse_setting(raw: Any, ui_path: str) -> SettingMap:
    if not isinstance(raw, Mapping):
        raise MalformedCatalog(f"{ui_path}: setting must be a mapping")
    try:
        selector = str(raw["selector"])
        value_name = str(raw["value_name"])
        encoding_raw = raw["encoding"]
    except KeyError as exc:
        raise MalformedCatalog(f"{ui_path}: setting lacks {exc.args[0]!r}") from None
    if encoding_raw == INTEGER_ENCODING:
        encoding: Mapping[str, TypedAction] | str = INTEGER_ENCODING
    elif isinstance(encoding_raw, Mapping):
        try:
            encoding = {str(k): parse_action(str(v)) for k, v in encoding_raw.items()}
        except MalformedAction as exc:
            raise MalformedCatalog(f"{ui_path}: {exc}") from None
    else:
        raise MalformedCatalog(f"{ui_path}: encoding must be a mapping or 'integer'")
    if selector == MAIN_SETTING:
        if not isinstance(encoding, Mapping) or not {"Enabled", "Disabled"} <= set(encoding):
            raise IncompleteMainSettingEncoding(
                f"{ui_path}: main_setting must encode both Enabled and Disabled"
            )
    return SettingMap(selector, value_name, encoding)


def load_policy_catalog(text: str) -> PolicyCatalog:
    """Parse a catalog document (YAML, top-level ``policies`` list)."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise MalformedCatalog(f"catalog is not valid YAML: {exc}") from None
    if data is None:
        return PolicyCatalog({})
    if not isinstance(data, Mapping) or not isinstance(data.get("policies", []), list):
        raise MalformedCatalog("catalog must be a mapping with a 'policies' list")
    entries: dict[str, PolicyEntry] = {}
    for raw in data.get("policies") or []:
        if not isinstance(raw, Mapping) or "ui_path" not in raw or "registry_key" not in raw:
            raise MalformedCatalog(f"policy entry needs ui_path and registry_key: {raw!r}")
        ui_path = str(raw["ui_path"])
        if ui_path in entries:
            raise DuplicateUiPath(f"duplicate ui_path {ui_path!r}")
        config = str(raw.get("config", "Computer"))
        if config not in CONFIGS:
            raise MalformedCatalog(f"{ui_path}: config must be Computer or User")
        settings = tuple(_parse_setting(s, ui_path) for s in raw.get("settings") or [])
        selectors = [s.selector for s in settings]
        if len(set(selectors)) != len(selectors):
            raise MalformedCatalog(f"{ui_path}: duplicate setting selectors")
        if MAIN_SETTING not in selectors:
            raise IncompleteMainSettingEncoding(f"{ui_path}: no main_setting encoding")
        entries[ui_path] = PolicyEntry(ui_path, str(raw["registry_key"]), settings, config)
    return PolicyCatalog(entries)


def transform_gpo(a: WinGpo, catalog: PolicyCatalog) -> Compound:
    """Translate a policy automation into the registry writes it implies.

    Children follow the catalog's setting order; a constraint on an option
    is attached to the registry automation generated for that option.
    """
    if a.ui_path not in catalog:
        raise UnknownPolicyPath(f"no catalog entry for policy {a.ui_path!r}")
    entry = catalog[a.ui_path]
    for option in a.value:
        if entry.setting(option) is None:
            raise UnknownOption(f"policy {a.ui_path!r} has no option {option!r}")
    for option in a.constraints:
        if option not in a.value:
            raise UnknownOption(f"constraint on {option!r}, which is not set in the value")
        setting = entry.setting(option)
        if setting is None or not setting.is_integer:
            raise UnencodableValue(f"constraints only apply to integer options, not {option!r}")
        value = a.value[option]
        if isinstance(value, int) and not isinstance(value, bool) and not a.constraints[option].admits(value):
            raise UnencodableValue(f"value {value!r} of {option!r} violates its constraint")
    children = []
    for setting in entry.settings:
        if setting.selector not in a.value:
            continue
        children.append(
            WindowsRegistry(
                config=entry.config,
                registry_key=entry.registry_key,
                value_name=setting.value_name,
                action=setting.encode(a.value[setting.selector]),
                constraint=a.constraints.get(setting.selector),
            )
        )
    return Compound(tuple(children))


def resolve_automations(automations: list[Automation] | tuple[Automation, ...],
                        catalog: PolicyCatalog) -> list[ConcreteAutomation]:
    out: list[ConcreteAutomation] = []
    for a in automations:
        if isinstance(a, WinGpo):
            out.extend(transform_gpo(a, catalog).automations)
        elif isinstance(a, Compound):
            for child in a.automations:
                if isinstance(child, Compound):
                    raise MalformedAutomation("nested compound automations are not supported")
                out.extend(resolve_automations([child], catalog))
        elif isinstance(a, (WindowsRegistry, Script)):
            out.append(a)
        else:
            raise TypeError(f"not an automation: {a!r}")
    return out


def resolve_rule_automations(rule, catalog: PolicyCatalog) -> list[ConcreteAutomation]:
    """Concrete automations for every implementation of ``rule``, in order.

    An empty list means the rule has no automation.
    """
    automations = [a for impl in rule.implementations for a in impl.automations]
    return resolve_automations(automations, catalog)
