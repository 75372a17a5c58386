"""Exception hierarchy shared by all scapolite_ci modules."""

from __future__ import annotations


class ScapoliteError(Exception):
    """Base class; ``rule_id`` is filled in when an error is raised while
    processing a specific rule."""

    rule_id: str | None = None

    def __str__(self) -> str:
        msg = super().__str__()
        if self.rule_id:
            return f"{self.rule_id}: {msg}"
        return msg


# guide documents and profiles
class MalformedFrontMatter(ScapoliteError):
    pass


class UnresolvablePath(ScapoliteError):
    pass


class DuplicatePath(ScapoliteError):
    pass


class InvalidRule(ScapoliteError):
    pass


class DuplicateRuleId(ScapoliteError):
    pass


class ProfileReferencesUnknownRule(ScapoliteError):
    pass


class MalformedProfile(ScapoliteError):
    pass


class UnknownProfile(ScapoliteError):
    pass


# automations and policy catalog
class MalformedAutomation(ScapoliteError):
    pass


class MalformedAction(ScapoliteError):
    pass


class MalformedCatalog(ScapoliteError):
    pass


class DuplicateUiPath(MalformedCatalog):
    pass


class IncompleteMainSettingEncoding(MalformedCatalog):
    pass


class UnknownPolicyPath(ScapoliteError):
    pass


class UnknownOption(ScapoliteError):
    pass


class UnencodableValue(ScapoliteError):
    pass


# artifacts
class MalformedRulepack(ScapoliteError):
    pass


class MalformedOval(ScapoliteError):
    pass


class DanglingReference(MalformedOval):
    pass


class UnsupportedFeature(MalformedOval):
    pass


# simulated target
class TargetError(ScapoliteError):
    pass


class ConnectionLost(TargetError):
    pass


class ScriptError(TargetError):
    pass


class UnknownScript(TargetError):
    pass


class MalformedFixture(ScapoliteError):
    pass


# test specification and runs
class MalformedSpec(ScapoliteError):
    pass


class DuplicateActivityId(MalformedSpec):
    pass


class DanglingCompareWith(MalformedSpec):
    pass


class ProfileResolutionError(ScapoliteError):
    pass


class BundleError(ScapoliteError):
    pass
