"""Exception hierarchy shared across the engine."""

from __future__ import annotations


class EngineError(Exception):
    """Base class for all engine errors."""


# -- skill packages ----------------------------------------------------------

class MissingBodyError(EngineError):
    """The package directory has no SKILL.md body file."""


class MalformedFrontMatterError(EngineError):
    """The body file front matter is missing or unterminated."""


class IllegalResourcePathError(EngineError):
    """A resource path escapes or ignores the references/ layout."""


# -- providers ---------------------------------------------------------------

class TransportError(EngineError):
    """The chat backend was unreachable after the configured retries."""


class MalformedResponseError(EngineError):
    """The chat backend returned a response the engine cannot accept."""


class ScriptExhaustedError(EngineError):
    """No scripted reply matches the current mock request."""


class UnboundPlaceholderError(EngineError):
    """A template placeholder has no binding."""


class UnknownModelError(EngineError):
    """The price table has no entry for the requested model or role."""


# -- tasks -------------------------------------------------------------------

class MissingOutputArtifactError(EngineError):
    """The workspace has no output artifact to evaluate."""


class UnreadableArtifactError(EngineError):
    """The output artifact exists but cannot be parsed."""


class PoolTooSmallError(EngineError):
    """The task pool cannot cover the requested split sizes."""


class NotEnoughFailuresError(EngineError):
    """Fewer failure tasks than the requested training-set size."""


# -- execution ---------------------------------------------------------------

class WorkspaceSetupError(EngineError):
    """The private task workspace could not be prepared."""


class MissingBaselineError(EngineError):
    """No stored initial-skill failure trajectory for a training task."""


# -- diagnosis ---------------------------------------------------------------

class EmptyDiagnosisError(EngineError):
    """The diagnoser returned blank output twice."""


class BatchDiagnosisFailureError(EngineError):
    """Every diagnosis in the batch failed."""


# -- momentum ----------------------------------------------------------------

class SchemaViolationError(EngineError):
    """The pattern-memory reply failed schema validation."""

    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


# -- patcher -----------------------------------------------------------------

class PatchError(EngineError):
    """Base class for patch proposal and application failures."""


class UnparseablePatchError(PatchError):
    """The patch reply could not be parsed into a valid edit set."""


class DeleteOfMissingResourceError(PatchError):
    """A patch deletes a resource the package does not have."""


class ResultInvalidError(PatchError):
    """Applying the patch would produce an invalid package."""


# -- optimizer / cli ---------------------------------------------------------

class ConfigError(EngineError):
    """The run configuration is inconsistent or incomplete."""


class CorruptRunDirError(EngineError):
    """The run directory has no resumable completed iteration."""


class RunLockedError(EngineError):
    """Another process holds the run directory lock."""


class MissingArtifactsError(EngineError):
    """A report needs run artifacts that were never produced."""
