"""Exception hierarchy shared across the package."""
from __future__ import annotations


class ReqAlignError(Exception):
    """Base class for all errors raised by this package."""


class ConfigInvalid(ReqAlignError):
    """A config value is missing or inconsistent for the selected backend/mode."""


class BackendUnavailable(ReqAlignError):
    """The chat backend could not be reached after exhausting retries."""


class ScriptExhausted(BackendUnavailable):
    """The scripted mock has no response left for the requested key."""


class ReplayMismatch(BackendUnavailable):
    """A replayed request does not match the recorded cassette entry."""


class BudgetExceeded(ReqAlignError):
    """The session token ceiling was hit before the call could be made."""


class MalformedResponse(ReqAlignError):
    """The backend returned an empty or structurally unusable reply."""


class UnparsableModelOutput(ReqAlignError):
    """A model reply failed the stage's JSON schema even after one reformat retry."""


class EmptyChecklist(ReqAlignError):
    """An answer round was requested but the checklist has no open items."""


class NoCodeBlockFound(ReqAlignError):
    """No runnable program could be extracted from the model reply."""


class PlanTextMismatch(ReqAlignError):
    """A mask plan was applied to text that differs from the validated source."""


class EmptyPlan(ReqAlignError):
    """Recovery was requested for a plan with no accepted spans."""


class SandboxError(ReqAlignError):
    """A program could not be spawned or supervised (distinct from it failing)."""


class SessionError(ReqAlignError):
    """An unrecoverable stage error inside a session; the partial trace survives."""


class FormatError(ReqAlignError):
    """A dataset record could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class MissingTests(ReqAlignError):
    """A dataset record carries no usable test cases."""


class DomainError(ReqAlignError):
    """Arguments fall outside an operation's declared domain."""


class SchemaMismatch(ReqAlignError):
    """A persisted trace or report does not match the expected schema."""
