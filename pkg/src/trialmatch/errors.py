"""Exception hierarchy shared across the pipeline stages."""

from __future__ import annotations


class TrialMatchError(Exception):
    """Base class for all pipeline errors."""


# --- document ingest ---

class IngestError(TrialMatchError):
    pass


class EmptyInput(IngestError):
    """Document content is empty or whitespace-only."""


class EmptyBundle(IngestError):
    """A patient bundle contains no documents."""


class MixedPatient(IngestError):
    """Documents in one bundle carry different patient ids."""


class DuplicateDocument(IngestError):
    """Two documents in one bundle share a doc_id."""


# --- prompt templates ---

class TemplateError(TrialMatchError):
    pass


class DuplicateVersion(TemplateError):
    """A (template_id, version) pair was registered twice."""


class MalformedBody(TemplateError):
    """Template body fails to parse or references undeclared variables."""


class MissingVariable(TemplateError):
    """Render context lacks a required variable."""

    def __init__(self, variable: str):
        super().__init__(f"missing required template variable: {variable}")
        self.variable = variable


class RenderOverflow(TemplateError):
    """Rendered prompt exceeds the configured character bound."""


# --- inference ---

class InferenceError(TrialMatchError):
    pass


class ContextOverflow(InferenceError):
    """Prompt would not fit in the model context window."""


class EndpointUnavailable(InferenceError):
    """Inference endpoint unreachable after exhausting retries."""


class ReplayMiss(EndpointUnavailable):
    """No recorded transcript exists for the prompt digest."""


class MalformedResponse(InferenceError):
    """Endpoint returned a non-text payload."""


class NoStructuredPayload(InferenceError):
    """Model answer contains no balanced JSON object."""


class ParseFailure(InferenceError):
    """A balanced JSON span was found but did not parse after repairs."""


# --- extraction / assessment schemas ---

class ExtractionSchemaViolation(TrialMatchError):
    """Patient report still violates the schema after one corrective re-prompt."""

    def __init__(self, violations: list[str]):
        super().__init__("patient report schema violations: " + "; ".join(violations))
        self.violations = list(violations)


class AssessmentSchemaViolation(TrialMatchError):
    """Eligibility assessment still violates the schema after one corrective re-prompt."""

    def __init__(self, violations: list[str]):
        super().__init__("assessment schema violations: " + "; ".join(violations))
        self.violations = list(violations)


class MissingDiagnosis(TrialMatchError):
    """Primary diagnosis unavailable; trial retrieval cannot proceed."""


# --- registry ---

class RegistryError(TrialMatchError):
    pass


class RegistryUnavailable(RegistryError):
    """Registry unreachable (or fixture missing) after retries."""


class QuotaExceeded(RegistryError):
    """Registry signalled rate limiting."""


# --- reports / pipeline ---

class IoFailure(TrialMatchError):
    """Failed to persist an artifact."""


class ConfigError(TrialMatchError):
    """Pipeline configuration invalid; no work was started."""


class ConfigMismatch(TrialMatchError):
    """Resume attempted with a config digest differing from the manifest."""


class AbortRun(TrialMatchError):
    """Raised by a stage-completion hook to stop the run at a checkpoint."""
