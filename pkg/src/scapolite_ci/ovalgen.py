"""Generate OVAL registry checks from a rulepack.

Only a small subset of OVAL is produced: definitions, criteria and
``registry_test``/``registry_object``/``registry_state``. Two layouts are
available: ``nested`` places each object and state inside its test (easy to
read), ``flat`` uses the standard ``tests``/``objects``/``states`` sections
with references. Entries that cannot be expressed (script checks, rules
without automation) become definitions over an ``unknown_test``.

Numeric ids start at 100000 and advance by 10 per rulepack entry, so the
ids of a rule do not move when other rules gain automations.
"""

from __future__ import annotations

import xml.etree.ElementTree as ET

from .automation import WindowsRegistry
from .rulepack import Rulepack, RulepackEntry

DEF_NS = "http://oval.mitre.org/XMLSchema/oval-definitions-5"
COMMON_NS = "http://oval.mitre.org/XMLSchema/oval-common-5"
WIN_NS = "http://oval.mitre.org/XMLSchema/oval-definitions-5#windows"
IND_NS = "http://oval.mitre.org/XMLSchema/oval-definitions-5#independent"

NAMESPACES = {"": DEF_NS, "oval": COMMON_NS, "win": WIN_NS, "ind": IND_NS}

ID_START = 100000
ID_STRIDE = 10
# extra states of one test (min and max bound) are numbered in a separate range
EXTRA_STATE_OFFSET = 100_000_000
REFERENCE_SOURCE = "scapolite"
SCHEMA_VERSION = "5.11.2"

HIVES = {"Computer": "HKEY_LOCAL_MACHINE", "User": "HKEY_CURRENT_USER"}
REG_TYPES = {"DWORD": "reg_dword", "SZ": "reg_sz"}

for _prefix, _uri in NAMESPACES.items():
    ET.register_namespace(_prefix, _uri)


def _d(tag: str) -> str:
    return f"{{{DEF_NS}}}{tag}"


def _w(tag: str) -> str:
    return f"{{{WIN_NS}}}{tag}"


def _entity(parent: ET.Element, tag: str, text: str, **attrs: str) -> ET.Element:
    el = ET.SubElement(parent, _w(tag), attrs)
    el.text = text
    return el


def _registry_object(num: int, a: WindowsRegistry) -> ET.Element:
    obj = ET.Element(_w("registry_object"), {"id": f"oval:obj:{num}", "version": "1"})
    _entity(obj, "hive", HIVES[a.config], datatype="string", operation="equals")
    _entity(obj, "key", a.registry_key, datatype="string", operation="case insensitive equals")
    _entity(obj, "name", a.value_name, datatype="string", operation="equals")
    return obj


def _registry_states(num: int, a: WindowsRegistry) -> list[ET.Element]:
    """One state per comparison; a min+max constraint needs two."""
    action = a.action
    if action.value_type == "DWORD":
        datatype = "int"
        if a.constraint is not None:
            comparisons = []
            if a.constraint.min is not None:
                comparisons.append(("greater than or equal", a.constraint.min))
            if a.constraint.max is not None:
                comparisons.append(("less than or equal", a.constraint.max))
        else:
            comparisons = [("equals", action.payload)]
    else:
        datatype = "string"
        comparisons = [("equals", action.payload)]
    states = []
    for k, (operation, value) in enumerate(comparisons):
        ste = ET.Element(_w("registry_state"), {"id": f"oval:ste:{num + k * EXTRA_STATE_OFFSET}", "version": "1"})
        _entity(ste, "type", REG_TYPES[action.value_type], datatype="string", operation="equals")
        _entity(ste, "value", str(value), datatype=datatype, entity_check="all", operation=operation)
        states.append(ste)
    return states


def _registry_test(num: int, n_states: int) -> ET.Element:
    attrs = {"check": "all", "check_existence": "at_least_one_exists",
             "id": f"oval:tst:{num}", "version": "1"}
    if n_states > 1:
        attrs["state_operator"] = "AND"
    return ET.Element(_w("registry_test"), attrs)


def _unknown_test(num: int, entry: RulepackEntry) -> ET.Element:
    reason = "rule has no automation" if entry.no_automation else "script automation cannot be expressed in OVAL"
    return ET.Element(f"{{{IND_NS}}}unknown_test",
                      {"check": "all", "comment": reason, "id": f"oval:tst:{num}", "version": "1"})


def _criteria(parent: ET.Element) -> ET.Element:
    return ET.SubElement(parent, _d("criteria"), {"negate": "false", "operator": "AND"})


def _criterion(parent: ET.Element, num: int) -> ET.Element:
    return ET.SubElement(parent, _d("criterion"), {"negate": "false", "test_ref": f"oval:tst:{num}"})


def allocate_ids(rp: Rulepack) -> list[int]:
    """Base id per entry; entries with more than ten automations take extra strides."""
    bases = []
    nxt = ID_START
    for e in rp.entries:
        bases.append(nxt)
        nxt += ID_STRIDE * max(1, -(-len(e.automations) // ID_STRIDE))
    return bases


def build_oval_tree(rp: Rulepack, layout: str = "nested") -> ET.Element:
    if layout not in ("nested", "flat"):
        raise ValueError(f"unknown OVAL layout {layout!r}")
    root = ET.Element(_d("oval_definitions"))
    gen = ET.SubElement(root, _d("generator"))
    ET.SubElement(gen, f"{{{COMMON_NS}}}product_name").text = "scapolite-ci"
    ET.SubElement(gen, f"{{{COMMON_NS}}}schema_version").text = SCHEMA_VERSION
    definitions = ET.SubElement(root, _d("definitions"))
    tests: list[ET.Element] = []
    objects: list[ET.Element] = []
    states: list[ET.Element] = []

    for base, entry in zip(allocate_ids(rp), rp.entries):
        definition = ET.SubElement(definitions, _d("definition"),
                                   {"class": "compliance", "id": f"oval:def:{base}", "version": "1"})
        meta = ET.SubElement(definition, _d("metadata"))
        ET.SubElement(meta, _d("title")).text = entry.title or entry.rule_id
        ET.SubElement(meta, _d("reference"), {"ref_id": entry.rule_id, "source": REFERENCE_SOURCE})
        outer = _criteria(definition)

        if not entry.registry_backed:
            crit = _criterion(outer, base)
            test = _unknown_test(base, entry)
            if layout == "nested":
                crit.append(test)
            else:
                tests.append(test)
            continue

        for j, a in enumerate(entry.automations):
            num = base + j
            crit = _criterion(_criteria(outer), num)
            obj = _registry_object(num, a)
            stes = _registry_states(num, a)
            test = _registry_test(num, len(stes))
            if layout == "nested":
                test.append(obj)
                test.extend(stes)
                crit.append(test)
            else:
                ET.SubElement(test, _w("object"), {"object_ref": obj.get("id")})
                for ste in stes:
                    ET.SubElement(test, _w("state"), {"state_ref": ste.get("id")})
                tests.append(test)
                objects.append(obj)
                states.extend(stes)

    if layout == "flat":
        for tag, items in (("tests", tests), ("objects", objects), ("states", states)):
            if items:
                ET.SubElement(root, _d(tag)).extend(items)
    return root


def emit_oval(rp: Rulepack, layout: str = "nested") -> bytes:
    root = build_oval_tree(rp, layout)
    ET.indent(root, space="  ")
    body = ET.tostring(root, encoding="unicode")
    return ('<?xml version="1.0" encoding="UTF-8"?>\n' + body + "\n").encode("utf-8")
