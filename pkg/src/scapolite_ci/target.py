"""Simulated target system.

A ``TargetState`` holds a registry-like store keyed by
``(config, registry_key, value_name)``, a table of canned script behaviours
and a set of *disruptor* settings. Writing a disruptor setting succeeds but
severs the connection: every later operation raises ``ConnectionLost``
until the state is restored from a snapshot.

Instances are single-owner; use one per testrun.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator, Mapping

import yaml

from .automation import CONFIGS, TypedAction, parse_action
from .errors import ConnectionLost, MalformedAction, MalformedFixture, ScriptError, UnknownScript

Triple = tuple[str, str, str]


@dataclass(frozen=True)
class Output:
    text: str


@dataclass(frozen=True)
class Failure:
    message: str


ScriptBehavior = Output | Failure


def script_key(script: str) -> str:
    """Scripts are looked up by a hash of their text, ignoring outer whitespace."""
    return hashlib.sha256(script.strip().encode("utf-8")).hexdigest()


class TargetState:
    def __init__(self, store: Mapping[Triple, TypedAction] | None = None,
                 scripts: Mapping[str, ScriptBehavior] | None = None,
                 disruptors: set[Triple] | frozenset[Triple] | None = None,
                 connected: bool = True) -> None:
        self._store: dict[Triple, TypedAction] = dict(store or {})
        self._scripts: dict[str, ScriptBehavior] = dict(scripts or {})
        self.disruptors: frozenset[Triple] = frozenset(disruptors or ())
        self.connected = connected

    def __repr__(self) -> str:
        return (f"TargetState({len(self._store)} values, {len(self._scripts)} scripts, "
                f"{len(self.disruptors)} disruptors, connected={self.connected})")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TargetState):
            return NotImplemented
        return (self._store == other._store and self._scripts == other._scripts
                and self.disruptors == other.disruptors and self.connected == other.connected)

    def _ensure_connected(self) -> None:
        if not self.connected:
            raise ConnectionLost("connection to the target was lost")

    @property
    def store(self) -> dict[Triple, TypedAction]:
        """Copy of the current store, for inspection by tests."""
        return dict(self._store)

    def register_script(self, script: str, behavior: ScriptBehavior) -> None:
        self._scripts[script_key(script)] = behavior

    def read_value(self, config: str, key: str, name: str) -> TypedAction | None:
        self._ensure_connected()
        return self._store.get((config, key, name))

    def write_value(self, config: str, key: str, name: str, action: TypedAction) -> TypedAction | None:
        self._ensure_connected()
        triple = (config, key, name)
        previous = self._store.get(triple)
        self._store[triple] = action
        if triple in self.disruptors:
            self.connected = False
        return previous

    def delete_value(self, config: str, key: str, name: str) -> TypedAction | None:
        self._ensure_connected()
        return self._store.pop((config, key, name), None)

    def iter_values(self) -> Iterator[tuple[Triple, TypedAction]]:
        """Enumerate the store (used by scanners that match keys loosely)."""
        self._ensure_connected()
        return iter(sorted(self._store.items()))

    def run_script(self, script: str) -> str:
        self._ensure_connected()
        behavior = self._scripts.get(script_key(script))
        if behavior is None:
            raise UnknownScript(f"no behaviour registered for script {script.strip()[:60]!r}")
        if isinstance(behavior, Failure):
            raise ScriptError(behavior.message)
        return behavior.text

    def ping(self) -> None:
        """Connectivity probe; raises ``ConnectionLost`` when disconnected."""
        self._ensure_connected()

    def snapshot(self) -> TargetState:
        return TargetState(self._store, self._scripts, self.disruptors, self.connected)

    def restore(self, snap: TargetState) -> None:
        self._store = dict(snap._store)
        self._scripts = dict(snap._scripts)
        self.disruptors = snap.disruptors
        self.connected = snap.connected


# -- fixture files ----------------------------------------------------------

def _triple(raw: Any) -> Triple:
    if not isinstance(raw, Mapping):
        raise MalformedFixture(f"expected a mapping with config/key/name, got {raw!r}")
    try:
        config, key, name = str(raw.get("config", "Computer")), str(raw["key"]), str(raw["name"])
    except KeyError as exc:
        raise MalformedFixture(f"setting lacks {exc.args[0]!r}: {raw!r}") from None
    if config not in CONFIGS:
        raise MalformedFixture(f"config must be Computer or User, got {config!r}")
    return (config, key, name)


def target_from_dict(data: Mapping[str, Any] | None) -> TargetState:
    data = data or {}
    store = {}
    for raw in data.get("store") or []:
        try:
            store[_triple(raw)] = parse_action(str(raw["value"]))
        except (KeyError, MalformedAction) as exc:
            raise MalformedFixture(f"bad store entry {raw!r}: {exc}") from None
    scripts: dict[str, ScriptBehavior] = {}
    for raw in data.get("scripts") or []:
        if not isinstance(raw, Mapping) or "script" not in raw:
            raise MalformedFixture(f"script entry needs 'script': {raw!r}")
        if "failure" in raw:
            behavior: ScriptBehavior = Failure(str(raw["failure"]))
        elif "output" in raw:
            behavior = Output(str(raw["output"]))
        else:
            raise MalformedFixture(f"script entry needs 'output' or 'failure': {raw!r}")
        scripts[script_key(str(raw["script"]))] = behavior
    disruptors = {_triple(raw) for raw in data.get("disruptors") or []}
    return TargetState(store, scripts, disruptors)


class TargetFixture:
    """A target fixture file: a default target, optionally overridden per testrun.

    Layout::

        store: [{config: Computer, key: ..., name: ..., value: DWORD:1}, ...]
        scripts: [{script: ..., output: ...} | {script: ..., failure: ...}, ...]
        disruptors: [{config: Computer, key: ..., name: ...}, ...]
        testruns:
          <testrun name>: {store: ..., scripts: ..., disruptors: ...}
    """

    def __init__(self, data: Mapping[str, Any] | None) -> None:
        data = dict(data or {})
        self._per_testrun = dict(data.pop("testruns", None) or {})
        self._default = data
        # validate eagerly so a broken fixture fails before any run starts
        target_from_dict(self._default)
        for raw in self._per_testrun.values():
            target_from_dict(raw)

    @classmethod
    def load(cls, path: str | Path) -> TargetFixture:
        try:
            data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except yaml.YAMLError as exc:
            raise MalformedFixture(f"{path}: {exc}") from None
        if data is not None and not isinstance(data, Mapping):
            raise MalformedFixture(f"{path}: fixture must be a mapping")
        return cls(data)

    def create(self, testrun_name: str | None = None) -> TargetState:
        if testrun_name in self._per_testrun:
            return target_from_dict(self._per_testrun[testrun_name])
        return target_from_dict(self._default)
