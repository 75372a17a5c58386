"""Evaluate the OVAL registry subset against a simulated target.

This is the independent checker: it knows nothing about rulepacks and
works purely from the XML. Both the nested layout (objects and states
inside their test) and the flat layout (``tests``/``objects``/``states``
sections with references) are accepted.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from enum import Enum
from typing import Union

from .errors import ConnectionLost, DanglingReference, MalformedOval, UnsupportedFeature
from .executor import CheckCategory, CheckRun
from .ovalgen import DEF_NS, IND_NS, WIN_NS
from .target import TargetState

HIVE_CONFIG = {"HKEY_LOCAL_MACHINE": "Computer", "HKEY_CURRENT_USER": "User"}
TYPE_NAMES = {"reg_dword": "DWORD", "reg_sz": "SZ"}
OPERATIONS = ("equals", "not equal", "case insensitive equals",
              "greater than", "greater than or equal", "less than", "less than or equal")


class OvalOutcome(str, Enum):
    PASS = "pass"
    FAIL = "fail"
    ERROR = "error"


@dataclass(frozen=True)
class Criterion:
    test_ref: str
    negate: bool = False


@dataclass(frozen=True)
class Criteria:
    operator: str
    children: tuple[Union["Criteria", Criterion], ...]
    negate: bool = False


Node = Union[Criteria, Criterion]


@dataclass(frozen=True)
class Entity:
    text: str
    operation: str = "equals"
    datatype: str = "string"


@dataclass(frozen=True)
class RegistryObject:
    id: str
    hive: Entity
    key: Entity
    name: Entity


@dataclass(frozen=True)
class RegistryState:
    id: str
    type: Entity | None
    value: Entity | None


@dataclass(frozen=True)
class RegistryTest:
    id: str
    check: str
    check_existence: str
    object_ref: str
    state_refs: tuple[str, ...]
    state_operator: str = "AND"


@dataclass(frozen=True)
class UnknownTest:
    id: str
    comment: str = ""


@dataclass(frozen=True)
class Definition:
    id: str
    rule_id: str
    criteria: Criteria


@dataclass
class OvalDoc:
    """``definitions`` holds the evaluable (registry) definitions;
    ``unresolved`` the rule ids whose definitions rest on unknown tests."""

    definitions: list[Definition] = field(default_factory=list)
    unresolved: list[str] = field(default_factory=list)
    tests: dict[str, RegistryTest | UnknownTest] = field(default_factory=dict)
    objects: dict[str, RegistryObject] = field(default_factory=dict)
    states: dict[str, RegistryState] = field(default_factory=dict)


@dataclass
class OvalResult:
    per_rule: dict[str, OvalOutcome] = field(default_factory=dict)
    failure: str | None = None


# -- parsing ----------------------------------------------------------------

def _local(el: ET.Element) -> tuple[str, str]:
    if el.tag.startswith("{"):
        ns, _, name = el.tag[1:].partition("}")
        return ns, name
    return "", el.tag


def _unsupported(el: ET.Element) -> UnsupportedFeature:
    ns, name = _local(el)
    return UnsupportedFeature(f"unsupported OVAL element <{name}> (namespace {ns or 'none'})")


def _bool(value: str | None) -> bool:
    if value in (None, "false", "0"):
        return False
    if value in ("true", "1"):
        return True
    raise MalformedOval(f"bad boolean {value!r}")


def _entity(el: ET.Element) -> Entity:
    operation = el.get("operation", "equals")
    if operation not in OPERATIONS:
        raise UnsupportedFeature(f"unsupported operation {operation!r}")
    if el.get("var_ref") is not None:
        raise UnsupportedFeature("OVAL variables are not supported")
    return Entity((el.text or "").strip(), operation, el.get("datatype", "string"))


def _req_id(el: ET.Element) -> str:
    ident = el.get("id")
    if not ident:
        raise MalformedOval(f"<{_local(el)[1]}> lacks an id")
    return ident


class _Parser:
    def __init__(self) -> None:
        self.doc = OvalDoc()

    def _add(self, table: dict, ident: str, item: object) -> None:
        if ident in table and table[ident] != item:
            raise MalformedOval(f"duplicate id {ident!r}")
        table[ident] = item

    def registry_object(self, el: ET.Element) -> str:
        ident = _req_id(el)
        parts: dict[str, Entity] = {}
        for child in el:
            ns, name = _local(child)
            if ns != WIN_NS or name not in ("hive", "key", "name"):
                raise _unsupported(child)
            parts[name] = _entity(child)
        missing = {"hive", "key", "name"} - parts.keys()
        if missing:
            raise MalformedOval(f"registry_object {ident} lacks {sorted(missing)}")
        if parts["hive"].text not in HIVE_CONFIG:
            raise UnsupportedFeature(f"unsupported hive {parts['hive'].text!r}")
        self._add(self.doc.objects, ident, RegistryObject(ident, parts["hive"], parts["key"], parts["name"]))
        return ident

    def registry_state(self, el: ET.Element) -> str:
        ident = _req_id(el)
        parts: dict[str, Entity] = {}
        for child in el:
            ns, name = _local(child)
            if ns != WIN_NS or name not in ("type", "value"):
                raise _unsupported(child)
            parts[name] = _entity(child)
        if "type" in parts and parts["type"].text not in TYPE_NAMES:
            raise UnsupportedFeature(f"unsupported registry type {parts['type'].text!r}")
        self._add(self.doc.states, ident, RegistryState(ident, parts.get("type"), parts.get("value")))
        return ident

    def test(self, el: ET.Element) -> str:
        ns, name = _local(el)
        ident = _req_id(el)
        if ns == IND_NS and name == "unknown_test":
            self._add(self.doc.tests, ident, UnknownTest(ident, el.get("comment", "")))
            return ident
        if ns != WIN_NS or name != "registry_test":
            raise _unsupported(el)
        object_ref = None
        state_refs = []
        for child in el:
            cns, cname = _local(child)
            if cns != WIN_NS:
                raise _unsupported(child)
            if cname == "registry_object":
                object_ref = self.registry_object(child)
            elif cname == "registry_state":
                state_refs.append(self.registry_state(child))
            elif cname == "object":
                object_ref = child.get("object_ref")
            elif cname == "state":
                state_refs.append(child.get("state_ref") or "")
            else:
                raise _unsupported(child)
        if not object_ref:
            raise MalformedOval(f"registry_test {ident} has no object")
        check = el.get("check", "all")
        existence = el.get("check_existence", "at_least_one_exists")
        if check not in ("all", "at least one", "none satisfy", "only one"):
            raise MalformedOval(f"bad check {check!r}")
        if existence not in ("at_least_one_exists", "any_exist", "none_exist", "all_exist"):
            raise UnsupportedFeature(f"unsupported check_existence {existence!r}")
        state_operator = el.get("state_operator", "AND")
        if state_operator not in ("AND", "OR"):
            raise UnsupportedFeature(f"unsupported state_operator {state_operator!r}")
        self._add(self.doc.tests, ident,
                  RegistryTest(ident, check, existence, object_ref, tuple(state_refs), state_operator))
        return ident

    def criteria(self, el: ET.Element) -> Criteria:
        operator = el.get("operator", "AND")
        if operator not in ("AND", "OR"):
            raise UnsupportedFeature(f"unsupported criteria operator {operator!r}")
        children: list[Node] = []
        for child in el:
            ns, name = _local(child)
            if ns != DEF_NS:
                raise _unsupported(child)
            if name == "criteria":
                children.append(self.criteria(child))
            elif name == "criterion":
                ref = child.get("test_ref")
                if not ref:
                    raise MalformedOval("criterion lacks test_ref")
                for inner in child:
                    self.test(inner)
                children.append(Criterion(ref, _bool(child.get("negate"))))
            else:
                raise _unsupported(child)
        if not children:
            raise MalformedOval("empty criteria")
        return Criteria(operator, tuple(children), _bool(el.get("negate")))

    def definition(self, el: ET.Element) -> Definition:
        ident = _req_id(el)
        rule_id = None
        criteria = None
        for child in el:
            ns, name = _local(child)
            if ns != DEF_NS:
                raise _unsupported(child)
            if name == "metadata":
                for m in child:
                    if _local(m) == (DEF_NS, "reference") and rule_id is None:
                        rule_id = m.get("ref_id")
            elif name == "criteria":
                criteria = self.criteria(child)
            else:
                raise _unsupported(child)
        if criteria is None:
            raise MalformedOval(f"definition {ident} has no criteria")
        return Definition(ident, rule_id or ident, criteria)

    def section(self, el: ET.Element, handler) -> None:
        for child in el:
            handler(child)


def _test_refs(node: Node) -> list[str]:
    if isinstance(node, Criterion):
        return [node.test_ref]
    return [r for c in node.children for r in _test_refs(c)]


def parse_oval(data: bytes | str) -> OvalDoc:
    try:
        root = ET.fromstring(data)
    except ET.ParseError as exc:
        raise MalformedOval(f"not well-formed XML: {exc}") from None
    if _local(root) != (DEF_NS, "oval_definitions"):
        raise MalformedOval(f"root element must be oval_definitions, got {root.tag!r}")
    p = _Parser()
    definitions: list[Definition] = []

    def obj(child: ET.Element) -> None:
        if _local(child) != (WIN_NS, "registry_object"):
            raise _unsupported(child)
        p.registry_object(child)

    def ste(child: ET.Element) -> None:
        if _local(child) != (WIN_NS, "registry_state"):
            raise _unsupported(child)
        p.registry_state(child)

    def dfn(child: ET.Element) -> None:
        if _local(child) != (DEF_NS, "definition"):
            raise _unsupported(child)
        definitions.append(p.definition(child))

    for section in root:
        ns, name = _local(section)
        if ns != DEF_NS:
            raise _unsupported(section)
        if name == "generator":
            continue
        handlers = {"definitions": dfn, "tests": p.test, "objects": obj, "states": ste}
        if name not in handlers:
            raise _unsupported(section)
        p.section(section, handlers[name])

    doc = p.doc
    for t in doc.tests.values():
        if isinstance(t, RegistryTest):
            if t.object_ref not in doc.objects:
                raise DanglingReference(f"{t.id} references missing object {t.object_ref!r}")
            for s in t.state_refs:
                if s not in doc.states:
                    raise DanglingReference(f"{t.id} references missing state {s!r}")
    for d in definitions:
        refs = _test_refs(d.criteria)
        for r in refs:
            if r not in doc.tests:
                raise DanglingReference(f"{d.id} references missing test {r!r}")
        if any(isinstance(doc.tests[r], UnknownTest) for r in refs):
            doc.unresolved.append(d.rule_id)
        else:
            doc.definitions.append(d)
    return doc


# -- evaluation -------------------------------------------------------------

def _compare(actual: str | int, entity: Entity) -> bool:
    op = entity.operation
    if entity.datatype == "int":
        try:
            a, b = int(actual), int(entity.text)
        except ValueError:
            return False
    else:
        a, b = str(actual), entity.text
        if op == "case insensitive equals":
            return a.lower() == b.lower()
    if op in ("equals", "case insensitive equals"):
        return a == b
    if op == "not equal":
        return a != b
    if op == "greater than":
        return a > b
    if op == "greater than or equal":
        return a >= b
    if op == "less than":
        return a < b
    if op == "less than or equal":
        return a <= b
    raise UnsupportedFeature(f"unsupported operation {op!r}")


def _state_holds(state: RegistryState, value) -> bool:
    if state.type is not None and TYPE_NAMES[state.type.text] != value.value_type:
        return False
    if state.value is not None and not _compare(value.payload, state.value):
        return False
    return True


def _eval_test(test: RegistryTest, doc: OvalDoc, target: TargetState) -> bool:
    obj = doc.objects[test.object_ref]
    config = HIVE_CONFIG[obj.hive.text]
    items = [v for (cfg, key, name), v in target.iter_values()
             if cfg == config and _compare(key, obj.key) and _compare(name, obj.name)]
    if test.check_existence == "none_exist":
        return not items
    if not items:
        return test.check_existence == "any_exist"
    if not test.state_refs:
        return True
    states = [doc.states[s] for s in test.state_refs]
    combine = all if test.state_operator == "AND" else any
    results = [combine(_state_holds(s, v) for s in states) for v in items]
    if test.check == "all":
        return all(results)
    if test.check == "at least one":
        return any(results)
    if test.check == "only one":
        return sum(results) == 1
    return not any(results)  # none satisfy


def eval_node(node: Node, leaf) -> bool:
    """Evaluate a criteria tree; ``leaf`` maps a test_ref to its boolean."""
    if isinstance(node, Criterion):
        value = leaf(node.test_ref)
    else:
        values = [eval_node(c, leaf) for c in node.children]
        value = all(values) if node.operator == "AND" else any(values)
    return value != node.negate


def evaluate(doc: OvalDoc, target: TargetState) -> OvalResult:
    result = OvalResult()
    cache: dict[str, bool] = {}

    def leaf(ref: str) -> bool:
        if ref not in cache:
            cache[ref] = _eval_test(doc.tests[ref], doc, target)
        return cache[ref]

    lost = False
    for d in doc.definitions:
        if lost:
            result.per_rule[d.rule_id] = OvalOutcome.ERROR
            continue
        try:
            result.per_rule[d.rule_id] = OvalOutcome.PASS if eval_node(d.criteria, leaf) else OvalOutcome.FAIL
        except ConnectionLost as exc:
            lost = True
            result.failure = str(exc)
            result.per_rule[d.rule_id] = OvalOutcome.ERROR
    for rule_id in doc.unresolved:
        result.per_rule[rule_id] = OvalOutcome.ERROR
    return result


_TO_CATEGORY = {
    OvalOutcome.PASS: CheckCategory.COMPLIANT,
    OvalOutcome.FAIL: CheckCategory.NON_COMPLIANT,
    OvalOutcome.ERROR: CheckCategory.UNKNOWN,
}


def to_check_categories(r: OvalResult) -> dict[str, CheckCategory]:
    """Map scanner outcomes onto check categories.

    OVAL has no notion of an absent setting, so rules the native checker
    calls ``empty`` come out ``non_compliant`` here.
    """
    return {rule: _TO_CATEGORY[o] for rule, o in r.per_rule.items()}


def oval_check_run(doc: OvalDoc, target: TargetState, rule_order: list[str] | None = None,
                   blacklist: list[str] | tuple[str, ...] = (), activity_id: str = "ciscat") -> CheckRun:
    """Run the scanner and present the result like a native check run."""
    result = evaluate(doc, target)
    cats = to_check_categories(result)
    order = rule_order if rule_order is not None else list(cats)
    bl = set(blacklist)
    run = CheckRun(activity_id, tool="oval", blacklisted=[r for r in order if r in bl], failure=result.failure)
    for rule_id in order:
        if rule_id in bl:
            continue
        outcome = result.per_rule.get(rule_id)
        if outcome is None:
            run.per_rule[rule_id] = (CheckCategory.UNKNOWN, "no OVAL definition")
        else:
            run.per_rule[rule_id] = (cats[rule_id], f"oval {outcome.value}")
    return run
