"""Step 1: extract a 14-category patient report from a document bundle.

The model answers with one JSON object keyed by category. Validation is
violation-list based so the caller can issue a single corrective re-prompt
before giving up.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

from .common import format_timestamp
from .errors import ExtractionSchemaViolation, NoStructuredPayload, ParseFailure
from .inference import InferenceClient, InferenceExchange, extract_structured
from .ingest import DocumentBundle
from .templating import (
    CATEGORY_KEYS,
    CategorySpec,
    PromptTemplate,
    RenderedPrompt,
    TABLE1_CATEGORIES,
    render,
)

logger = logging.getLogger(__name__)

MISSING_SENTINEL = "Need more info"

ZIP_RE = re.compile(r"^\d{5}$")

TEXT_KEYS = frozenset({
    "primary_diagnosis", "base_diagnosis", "performance_status", "treatment_goals",
})
LIST_KEYS = frozenset({
    "diagnosis_synonyms", "current_interventions", "treatment_history",
    "search_terms", "biomarkers", "laboratory_values", "comorbidities",
    "family_history", "eligibility_factors",
})
DEMOGRAPHICS_KEY = "patient_demographics"

SEX_VALUES = ("Male", "Female", "Unknown")

_KEY_TO_NAME = {key: name for name, key in TABLE1_CATEGORIES}


class FieldState(str, Enum):
    PRESENT = "Present"
    NEED_MORE_INFO = "NeedMoreInfo"


def _is_sentinel(value: object) -> bool:
    return isinstance(value, str) and value.strip().lower() == MISSING_SENTINEL.lower()


@dataclass(frozen=True)
class Demographics:
    """Structured demographics; None marks a sub-field the documents lack."""

    age: int | None = None
    sex: str = "Unknown"
    zip_code: str | None = None

    def __post_init__(self):
        if self.sex not in SEX_VALUES:
            raise ValueError(f"sex must be one of {SEX_VALUES}")

    def to_document(self) -> dict:
        return {
            "age": self.age if self.age is not None else MISSING_SENTINEL,
            "sex": self.sex,
            "zip_code": self.zip_code if self.zip_code is not None else MISSING_SENTINEL,
        }


@dataclass(frozen=True)
class FieldValue:
    state: FieldState
    value: object = None

    def __post_init__(self):
        # a missing field never carries data
        if self.state is FieldState.NEED_MORE_INFO and self.value is not None:
            raise ValueError("NeedMoreInfo field cannot carry a value")
        if self.state is FieldState.PRESENT and self.value is None:
            raise ValueError("Present field requires a value")

    @classmethod
    def present(cls, value: object) -> "FieldValue":
        return cls(FieldState.PRESENT, value)

    @classmethod
    def need_more_info(cls) -> "FieldValue":
        return cls(FieldState.NEED_MORE_INFO)

    @property
    def is_present(self) -> bool:
        return self.state is FieldState.PRESENT

    def to_document(self) -> object:
        if not self.is_present:
            return MISSING_SENTINEL
        if isinstance(self.value, Demographics):
            return self.value.to_document()
        if isinstance(self.value, tuple):
            return list(self.value)
        return self.value


@dataclass(frozen=True)
class ExtractionMetadata:
    template_id: str
    template_version: str
    model_name: str
    timestamp: str
    prompt_digest: str

    def to_document(self) -> dict:
        return {
            "template_id": self.template_id,
            "template_version": self.template_version,
            "model_name": self.model_name,
            "timestamp": self.timestamp,
            "prompt_digest": self.prompt_digest,
        }


@dataclass(frozen=True)
class PatientReport:
    """The 14-category structured report plus audit metadata."""

    patient_id: str
    fields: dict[str, FieldValue]
    extraction_metadata: ExtractionMetadata
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if set(self.fields) != set(CATEGORY_KEYS):
            raise ValueError("report must carry exactly the 14 category keys")

    def field(self, key: str) -> FieldValue:
        return self.fields[key]

    @property
    def primary_diagnosis(self) -> FieldValue:
        return self.fields["primary_diagnosis"]

    @property
    def base_diagnosis(self) -> FieldValue:
        return self.fields["base_diagnosis"]

    @property
    def diagnosis_synonyms(self) -> FieldValue:
        return self.fields["diagnosis_synonyms"]

    @property
    def patient_demographics(self) -> FieldValue:
        return self.fields["patient_demographics"]

    @property
    def current_interventions(self) -> FieldValue:
        return self.fields["current_interventions"]

    def field_lines(self) -> list[dict[str, str]]:
        """Name/value rows for prompt rendering, in category order."""
        rows = []
        for key in CATEGORY_KEYS:
            rows.append({"name": _KEY_TO_NAME[key], "value": render_field(self.fields[key])})
        return rows

    def to_document(self) -> dict:
        doc = {
            "patient_id": self.patient_id,
            "fields": {key: self.fields[key].to_document() for key in CATEGORY_KEYS},
            "extraction_metadata": self.extraction_metadata.to_document(),
        }
        if self.extras:
            doc["extras"] = self.extras
        return doc

    @classmethod
    def from_document(cls, doc: dict) -> "PatientReport":
        outcome = validate_report(doc.get("fields", {}))
        if outcome.violations:
            raise ExtractionSchemaViolation(outcome.violations)
        meta = doc.get("extraction_metadata", {})
        metadata = ExtractionMetadata(
            template_id=meta.get("template_id", ""),
            template_version=meta.get("template_version", ""),
            model_name=meta.get("model_name", ""),
            timestamp=meta.get("timestamp", ""),
            prompt_digest=meta.get("prompt_digest", ""),
        )
        return cls(
            patient_id=doc.get("patient_id", ""),
            fields=outcome.fields,
            extraction_metadata=metadata,
            extras=doc.get("extras", {}),
        )


def render_field(value: FieldValue) -> str:
    """Flatten a field to one prompt-ready line."""
    if not value.is_present:
        return MISSING_SENTINEL
    inner = value.value
    if isinstance(inner, Demographics):
        parts = []
        parts.append(f"age {inner.age}" if inner.age is not None else f"age {MISSING_SENTINEL}")
        parts.append(f"sex {inner.sex}")
        if inner.zip_code is not None:
            parts.append(f"ZIP {inner.zip_code}")
        return "; ".join(parts)
    if isinstance(inner, tuple):
        return "; ".join(inner) if inner else "None recorded"
    return str(inner)


@dataclass
class ValidationOutcome:
    """Typed fields plus blocking violations and advisory flags."""

    fields: dict[str, FieldValue] = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    violations: list[str] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def _validate_text(key: str, value: object, outcome: ValidationOutcome):
    if _is_sentinel(value):
        outcome.fields[key] = FieldValue.need_more_info()
        return
    if not isinstance(value, str):
        outcome.violations.append(f"{key}: not text")
        return
    if not value.strip():
        outcome.violations.append(f"{key}: empty text")
        return
    outcome.fields[key] = FieldValue.present(value.strip())


def _validate_list(key: str, value: object, outcome: ValidationOutcome):
    if _is_sentinel(value):
        outcome.fields[key] = FieldValue.need_more_info()
        return
    if not isinstance(value, list):
        outcome.violations.append(f"{key}: not a list")
        return
    items = []
    for i, item in enumerate(value):
        if not isinstance(item, str):
            outcome.violations.append(f"{key}[{i}]: not text")
            return
        if item.strip():
            items.append(item.strip())
    outcome.fields[key] = FieldValue.present(tuple(items))


def _validate_age(value: object) -> tuple[int | None, str | None]:
    if value is None or _is_sentinel(value):
        return None, None
    if isinstance(value, bool):
        return None, "patient_demographics.age: not an integer"
    if isinstance(value, int):
        age = value
    elif isinstance(value, str) and value.strip().isdigit():
        age = int(value.strip())
    else:
        return None, "patient_demographics.age: not an integer"
    if not 0 <= age <= 120:
        return None, "patient_demographics.age: outside 0-120"
    return age, None


def _validate_demographics(value: object, outcome: ValidationOutcome):
    key = DEMOGRAPHICS_KEY
    if _is_sentinel(value):
        outcome.fields[key] = FieldValue.need_more_info()
        return
    if not isinstance(value, dict):
        outcome.violations.append(f"{key}: not an object")
        return
    violations_before = len(outcome.violations)

    age, problem = _validate_age(value.get("age"))
    if problem:
        outcome.violations.append(problem)

    raw_sex = value.get("sex")
    sex = "Unknown"
    if raw_sex is not None and not _is_sentinel(raw_sex):
        if isinstance(raw_sex, str) and raw_sex.strip().title() in SEX_VALUES:
            sex = raw_sex.strip().title()
        else:
            outcome.violations.append(
                f"{key}.sex: not one of {'/'.join(SEX_VALUES)}"
            )

    raw_zip = value.get("zip_code")
    zip_code = None
    if raw_zip is not None and not _is_sentinel(raw_zip):
        if isinstance(raw_zip, str) and ZIP_RE.match(raw_zip.strip()):
            zip_code = raw_zip.strip()
        else:
            outcome.violations.append(f"{key}.zip_code: not a 5-digit ZIP")

    if len(outcome.violations) == violations_before:
        outcome.fields[key] = FieldValue.present(
            Demographics(age=age, sex=sex, zip_code=zip_code)
        )


def validate_report(raw: object) -> ValidationOutcome:
    """Check a model answer against the 14-category shape.

    Violations are machine-readable "path: problem" strings. Unknown keys do
    not block; they are kept in the extras bag and flagged.
    """
    outcome = ValidationOutcome()
    if not isinstance(raw, dict):
        outcome.violations.append("document: not an object")
        return outcome
    for key in CATEGORY_KEYS:
        if key not in raw:
            outcome.violations.append(f"{key}: missing")
            continue
        value = raw[key]
        if key == DEMOGRAPHICS_KEY:
            _validate_demographics(value, outcome)
        elif key in TEXT_KEYS:
            _validate_text(key, value, outcome)
        else:
            _validate_list(key, value, outcome)
    for key in raw:
        if key not in CATEGORY_KEYS:
            outcome.extras[key] = raw[key]
            outcome.flags.append(f"{key}: unknown key")
    return outcome


def corrective_prompt(original: RenderedPrompt, violations: Iterable[str],
                      rendered_at=None) -> RenderedPrompt:
    """Append the violation list to the original prompt for one more try."""
    lines = "\n".join(f"- {v}" for v in violations)
    text = (
        f"{original.text}\n\n"
        "Your previous reply could not be used. It failed these checks:\n"
        f"{lines}\n\n"
        "Reply again with ONLY the corrected JSON object.\n"
    )
    return RenderedPrompt(
        template_id=original.template_id,
        template_version=original.template_version,
        text=text,
        rendered_at=rendered_at if rendered_at is not None else original.rendered_at,
        context_digest=original.context_digest,
    )


def _attempt_parse(exchange: InferenceExchange) -> tuple[ValidationOutcome | None, list[str]]:
    try:
        raw = extract_structured(exchange.final_answer)
    except (NoStructuredPayload, ParseFailure) as exc:
        return None, [f"payload: {exc}"]
    outcome = validate_report(raw)
    return outcome, outcome.violations


def render_extraction_prompt(bundle: DocumentBundle, pie: PromptTemplate,
                             categories: tuple[CategorySpec, ...]) -> RenderedPrompt:
    """The extraction prompt for one bundle; context excludes timestamps so
    the prompt digest is stable across runs."""
    context = {
        "categories": [spec.to_context() for spec in categories],
        "patient_id": bundle.patient_id,
        "documents": bundle.normalized_text,
    }
    return render(pie, context)


def extract_patient_report(bundle: DocumentBundle, pie: PromptTemplate,
                           client: InferenceClient, categories: tuple[CategorySpec, ...],
                           clock) -> tuple[PatientReport, list[InferenceExchange]]:
    """Run the extraction prompt over a bundle and validate the answer.

    One corrective re-prompt is allowed; a second schema failure raises
    ExtractionSchemaViolation with the outstanding violation list.
    """
    prompt = render_extraction_prompt(bundle, pie, categories)
    exchanges: list[InferenceExchange] = []
    tag = f"extract:{bundle.patient_id}"

    exchange = client.complete(prompt, tag=tag)
    exchanges.append(exchange)
    outcome, violations = _attempt_parse(exchange)

    if violations:
        logger.info("extraction re-prompt for %s: %s", bundle.patient_id, violations)
        retry = corrective_prompt(prompt, violations)
        exchange = client.complete(retry, tag=tag)
        exchanges.append(exchange)
        outcome, violations = _attempt_parse(exchange)
        if violations:
            raise ExtractionSchemaViolation(violations)

    assert outcome is not None
    if outcome.flags:
        logger.info("extraction flags for %s: %s", bundle.patient_id, outcome.flags)
    metadata = ExtractionMetadata(
        template_id=pie.template_id,
        template_version=pie.version,
        model_name=client.config.model_name,
        timestamp=format_timestamp(clock.now()),
        prompt_digest=exchange.prompt_digest,
    )
    report = PatientReport(
        patient_id=bundle.patient_id,
        fields=outcome.fields,
        extraction_metadata=metadata,
        extras=outcome.extras,
    )
    return report, exchanges
