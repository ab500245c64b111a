"""Step 3: per patient-trial eligibility assessment with bounded parallelism.

Each pair gets one rendered evaluation prompt, one model exchange (plus at
most one corrective re-prompt), schema validation, and a deterministic
consistency check over the sub-criterion statuses. Failures are recorded per
pair and never abort a batch.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

from .common import format_timestamp
from .errors import (
    AssessmentSchemaViolation,
    NoStructuredPayload,
    ParseFailure,
    TrialMatchError,
)
from .extraction import PatientReport, corrective_prompt
from .inference import InferenceClient, InferenceExchange, extract_structured
from .retrieval import CandidateTrial
from .templating import PromptTemplate, render

logger = logging.getLogger(__name__)

CONSISTENCY_CHECK_NAME = "overall/sub-criteria consistency"


class EligibilityStatus(str, Enum):
    ELIGIBLE_NOW = "Eligible Now"
    COULD_BE_ELIGIBLE_FUTURE = "Could Be Eligible in Future"
    NOT_ELIGIBLE = "Not Eligible"
    NEED_MORE_INFORMATION = "Need More Information"


class ConfidenceLevel(str, Enum):
    HIGH = "HIGH"
    MEDIUM = "MEDIUM"
    LOW = "LOW"


STATUS_BY_STRING = {status.value: status for status in EligibilityStatus}
CONFIDENCE_BY_STRING = {level.value: level for level in ConfidenceLevel}


@dataclass(frozen=True)
class CriterionAssessment:
    name_or_criterion: str
    status: EligibilityStatus
    reasoning: str

    def __post_init__(self):
        if not self.reasoning.strip():
            raise ValueError("criterion reasoning must be non-empty")


@dataclass(frozen=True)
class QaEntry:
    check: str
    result: str  # "pass" or "flag"
    note: str


@dataclass(frozen=True)
class AssessorInformation:
    model_name: str
    pie_template_version: str
    ptee_template_version: str
    prompt_digest: str

    def to_document(self) -> dict:
        return {
            "model_name": self.model_name,
            "pie_template_version": self.pie_template_version,
            "ptee_template_version": self.ptee_template_version,
            "prompt_digest": self.prompt_digest,
        }


@dataclass(frozen=True)
class AssessmentMetadata:
    assessment_date: str
    trial_id: str
    patient_id: str
    assessor_information: AssessorInformation

    def to_document(self) -> dict:
        return {
            "assessment_date": self.assessment_date,
            "trial_id": self.trial_id,
            "patient_id": self.patient_id,
            "assessor_information": self.assessor_information.to_document(),
        }


@dataclass
class EligibilityAssessment:
    assessment_metadata: AssessmentMetadata
    eligibility_status: EligibilityStatus
    confidence_level: ConfidenceLevel
    summary: str
    primary_criteria_assessment: list[CriterionAssessment]
    clinical_criteria_assessment: list[CriterionAssessment]
    exclusion_criteria_assessment: list[CriterionAssessment]
    actionable_recommendations: list[str]
    missing_data_points: list[str]
    qa_checklist: list[QaEntry] = field(default_factory=list)
    reasoning_trace: str = ""

    def to_document(self) -> dict:
        def criteria(items: list[CriterionAssessment], name_key: str) -> list[dict]:
            return [
                {name_key: c.name_or_criterion, "status": c.status.value,
                 "reasoning": c.reasoning}
                for c in items
            ]
        return {
            "assessment_metadata": self.assessment_metadata.to_document(),
            "eligibility_summary": {
                "eligibility_status": self.eligibility_status.value,
                "confidence_level": self.confidence_level.value,
                "summary": self.summary,
            },
            "primary_criteria_assessment": criteria(self.primary_criteria_assessment, "name"),
            "clinical_criteria_assessment": criteria(self.clinical_criteria_assessment, "name"),
            "exclusion_criteria_assessment": criteria(
                self.exclusion_criteria_assessment, "criterion"
            ),
            "actionable_recommendations": list(self.actionable_recommendations),
            "missing_data_points": list(self.missing_data_points),
            "qa_checklist": [
                {"check": q.check, "result": q.result, "note": q.note}
                for q in self.qa_checklist
            ],
            "reasoning_trace": self.reasoning_trace,
        }

    @classmethod
    def from_document(cls, doc: dict) -> "EligibilityAssessment":
        meta = doc["assessment_metadata"]
        assessor = meta["assessor_information"]
        summary = doc["eligibility_summary"]

        def criteria(items, name_key) -> list[CriterionAssessment]:
            return [
                CriterionAssessment(item[name_key], STATUS_BY_STRING[item["status"]],
                                    item["reasoning"])
                for item in items
            ]
        return cls(
            assessment_metadata=AssessmentMetadata(
                assessment_date=meta["assessment_date"],
                trial_id=meta["trial_id"],
                patient_id=meta["patient_id"],
                assessor_information=AssessorInformation(
                    model_name=assessor["model_name"],
                    pie_template_version=assessor["pie_template_version"],
                    ptee_template_version=assessor["ptee_template_version"],
                    prompt_digest=assessor["prompt_digest"],
                ),
            ),
            eligibility_status=STATUS_BY_STRING[summary["eligibility_status"]],
            confidence_level=CONFIDENCE_BY_STRING[summary["confidence_level"]],
            summary=summary["summary"],
            primary_criteria_assessment=criteria(doc["primary_criteria_assessment"], "name"),
            clinical_criteria_assessment=criteria(doc["clinical_criteria_assessment"], "name"),
            exclusion_criteria_assessment=criteria(
                doc["exclusion_criteria_assessment"], "criterion"
            ),
            actionable_recommendations=list(doc["actionable_recommendations"]),
            missing_data_points=list(doc["missing_data_points"]),
            qa_checklist=[
                QaEntry(q["check"], q["result"], q["note"])
                for q in doc.get("qa_checklist", ())
            ],
            reasoning_trace=doc.get("reasoning_trace", ""),
        )


def _validate_criteria_list(raw: object, path: str, name_key: str,
                            violations: list[str]) -> list[CriterionAssessment]:
    if not isinstance(raw, list):
        violations.append(f"{path}: not a list")
        return []
    items = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict):
            violations.append(f"{path}[{i}]: not an object")
            continue
        name = entry.get(name_key)
        if not isinstance(name, str) or not name.strip():
            violations.append(f"{path}[{i}].{name_key}: missing or empty")
            continue
        status_text = entry.get("status")
        status = STATUS_BY_STRING.get(status_text) if isinstance(status_text, str) else None
        if status is None:
            violations.append(f"{path}[{i}].status: not a recognized status")
            continue
        reasoning = entry.get("reasoning")
        if not isinstance(reasoning, str) or not reasoning.strip():
            violations.append(f"{path}[{i}].reasoning: empty")
            continue
        items.append(CriterionAssessment(name.strip(), status, reasoning.strip()))
    return items


def _validate_string_list(raw: object, path: str, violations: list[str]) -> list[str]:
    if not isinstance(raw, list):
        violations.append(f"{path}: not a list")
        return []
    items = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, str):
            violations.append(f"{path}[{i}]: not text")
            continue
        if entry.strip():
            items.append(entry.strip())
    return items


@dataclass
class ParsedAssessment:
    """Validated model answer, before metadata and trace are attached."""

    eligibility_status: EligibilityStatus = EligibilityStatus.NEED_MORE_INFORMATION
    confidence_level: ConfidenceLevel = ConfidenceLevel.LOW
    summary: str = ""
    primary: list[CriterionAssessment] = field(default_factory=list)
    clinical: list[CriterionAssessment] = field(default_factory=list)
    exclusion: list[CriterionAssessment] = field(default_factory=list)
    recommendations: list[str] = field(default_factory=list)
    missing_data: list[str] = field(default_factory=list)
    qa_checklist: list[QaEntry] = field(default_factory=list)


def validate_assessment(raw: object) -> tuple[ParsedAssessment | None, list[str]]:
    """Check a model answer against the assessment schema.

    Returns (parsed, violations); parsed is None when violations exist.
    Status strings outside the four-value enumeration are violations, as are
    empty reasonings and broken conditional invariants.
    """
    violations: list[str] = []
    if not isinstance(raw, dict):
        return None, ["document: not an object"]

    required = (
        "eligibility_summary", "primary_criteria_assessment",
        "clinical_criteria_assessment", "exclusion_criteria_assessment",
        "actionable_recommendations", "missing_data_points", "qa_checklist",
    )
    for key in required:
        if key not in raw:
            violations.append(f"{key}: missing")
    if violations:
        return None, violations

    parsed = ParsedAssessment()
    summary_raw = raw["eligibility_summary"]
    if not isinstance(summary_raw, dict):
        violations.append("eligibility_summary: not an object")
    else:
        status_text = summary_raw.get("eligibility_status")
        status = STATUS_BY_STRING.get(status_text) if isinstance(status_text, str) else None
        if status is None:
            violations.append("eligibility_summary.eligibility_status: not a recognized status")
        else:
            parsed.eligibility_status = status
        confidence_text = summary_raw.get("confidence_level")
        confidence = (CONFIDENCE_BY_STRING.get(confidence_text)
                      if isinstance(confidence_text, str) else None)
        if confidence is None:
            violations.append("eligibility_summary.confidence_level: not HIGH/MEDIUM/LOW")
        else:
            parsed.confidence_level = confidence
        summary_text = summary_raw.get("summary")
        if not isinstance(summary_text, str) or not summary_text.strip():
            violations.append("eligibility_summary.summary: empty")
        else:
            parsed.summary = summary_text.strip()

    parsed.primary = _validate_criteria_list(
        raw["primary_criteria_assessment"], "primary_criteria_assessment", "name", violations
    )
    parsed.clinical = _validate_criteria_list(
        raw["clinical_criteria_assessment"], "clinical_criteria_assessment", "name", violations
    )
    parsed.exclusion = _validate_criteria_list(
        raw["exclusion_criteria_assessment"], "exclusion_criteria_assessment", "criterion",
        violations
    )
    parsed.recommendations = _validate_string_list(
        raw["actionable_recommendations"], "actionable_recommendations", violations
    )
    parsed.missing_data = _validate_string_list(
        raw["missing_data_points"], "missing_data_points", violations
    )

    qa_raw = raw["qa_checklist"]
    if not isinstance(qa_raw, list):
        violations.append("qa_checklist: not a list")
    else:
        for i, entry in enumerate(qa_raw):
            if not isinstance(entry, dict):
                violations.append(f"qa_checklist[{i}]: not an object")
                continue
            check = entry.get("check")
            result = entry.get("result")
            note = entry.get("note", "")
            if not isinstance(check, str) or not check.strip():
                violations.append(f"qa_checklist[{i}].check: missing")
                continue
            if result not in ("pass", "flag"):
                violations.append(f"qa_checklist[{i}].result: not pass/flag")
                continue
            parsed.qa_checklist.append(QaEntry(check.strip(), result, str(note)))

    # conditional completeness: these statuses demand supporting lists
    if not violations:
        if (parsed.eligibility_status is EligibilityStatus.NEED_MORE_INFORMATION
                and not parsed.missing_data):
            violations.append(
                "missing_data_points: empty despite Need More Information status"
            )
        if (parsed.eligibility_status is EligibilityStatus.COULD_BE_ELIGIBLE_FUTURE
                and not parsed.recommendations):
            violations.append(
                "actionable_recommendations: empty despite Could Be Eligible in Future status"
            )

    if violations:
        return None, violations
    return parsed, []


def derive_status(primary: list[EligibilityStatus], clinical: list[EligibilityStatus],
                  exclusion: list[EligibilityStatus]) -> EligibilityStatus:
    """Fixed-precedence aggregation over sub-criterion statuses."""
    everything = list(primary) + list(clinical) + list(exclusion)
    if EligibilityStatus.NOT_ELIGIBLE in everything:
        return EligibilityStatus.NOT_ELIGIBLE
    if EligibilityStatus.NEED_MORE_INFORMATION in list(exclusion) + list(primary):
        return EligibilityStatus.NEED_MORE_INFORMATION
    if EligibilityStatus.COULD_BE_ELIGIBLE_FUTURE in everything:
        return EligibilityStatus.COULD_BE_ELIGIBLE_FUTURE
    return EligibilityStatus.ELIGIBLE_NOW


def consistency_check(assessment: EligibilityAssessment) -> EligibilityStatus:
    """Compare the model's overall label with the derived aggregation.

    A mismatch appends a flag entry naming both statuses; the model's label
    is never overwritten.
    """
    derived = derive_status(
        [c.status for c in assessment.primary_criteria_assessment],
        [c.status for c in assessment.clinical_criteria_assessment],
        [c.status for c in assessment.exclusion_criteria_assessment],
    )
    if derived is assessment.eligibility_status:
        assessment.qa_checklist.append(QaEntry(
            check=CONSISTENCY_CHECK_NAME,
            result="pass",
            note=f'overall "{assessment.eligibility_status.value}" matches derived status',
        ))
    else:
        assessment.qa_checklist.append(QaEntry(
            check=CONSISTENCY_CHECK_NAME,
            result="flag",
            note=(f'overall "{assessment.eligibility_status.value}" vs '
                  f'derived "{derived.value}"'),
        ))
    return derived


def render_pair_prompt(report: PatientReport, trial: CandidateTrial,
                       ptee: PromptTemplate):
    """The evaluation prompt for one pair; context excludes timestamps so the
    prompt digest is stable across runs."""
    context = {
        "patient_id": report.patient_id,
        "patient_fields": report.field_lines(),
        "nct_id": trial.nct_id,
        "trial_title": trial.trial_title,
        "description": trial.description,
        "inclusion_criteria": trial.inclusion_criteria,
        "exclusion_criteria": trial.exclusion_criteria,
    }
    return render(ptee, context)


def assess_pair(report: PatientReport, trial: CandidateTrial, ptee: PromptTemplate,
                client: InferenceClient, clock,
                pie_version: str = "") -> tuple[EligibilityAssessment, list[InferenceExchange]]:
    """Evaluate one patient-trial pair through the model.

    One corrective re-prompt is allowed on schema or payload problems; a
    second failure raises AssessmentSchemaViolation.
    """
    prompt = render_pair_prompt(report, trial, ptee)
    tag = f"assess:{report.patient_id}:{trial.nct_id}"
    exchanges: list[InferenceExchange] = []

    def attempt(p) -> tuple[ParsedAssessment | None, list[str], InferenceExchange]:
        exchange = client.complete(p, tag=tag)
        exchanges.append(exchange)
        try:
            raw = extract_structured(exchange.final_answer)
        except (NoStructuredPayload, ParseFailure) as exc:
            return None, [f"payload: {exc}"], exchange
        parsed, violations = validate_assessment(raw)
        return parsed, violations, exchange

    parsed, violations, exchange = attempt(prompt)
    if violations:
        logger.info("assessment re-prompt for %s/%s: %s",
                    report.patient_id, trial.nct_id, violations)
        parsed, violations, exchange = attempt(corrective_prompt(prompt, violations))
        if violations:
            raise AssessmentSchemaViolation(violations)

    assert parsed is not None
    metadata = AssessmentMetadata(
        assessment_date=format_timestamp(clock.now()),
        trial_id=trial.nct_id,
        patient_id=report.patient_id,
        assessor_information=AssessorInformation(
            model_name=client.config.model_name,
            pie_template_version=pie_version or report.extraction_metadata.template_version,
            ptee_template_version=ptee.version,
            prompt_digest=exchange.prompt_digest,
        ),
    )
    assessment = EligibilityAssessment(
        assessment_metadata=metadata,
        eligibility_status=parsed.eligibility_status,
        confidence_level=parsed.confidence_level,
        summary=parsed.summary,
        primary_criteria_assessment=parsed.primary,
        clinical_criteria_assessment=parsed.clinical,
        exclusion_criteria_assessment=parsed.exclusion,
        actionable_recommendations=parsed.recommendations,
        missing_data_points=parsed.missing_data,
        qa_checklist=parsed.qa_checklist,
        reasoning_trace=exchange.reasoning_trace,
    )
    consistency_check(assessment)
    return assessment, exchanges


@dataclass(frozen=True)
class PairError:
    nct_id: str
    error_type: str
    message: str

    def to_document(self) -> dict:
        return {"nct_id": self.nct_id, "error_type": self.error_type,
                "message": self.message}


def run_batch(report: PatientReport, trials: list[CandidateTrial],
              ptee: PromptTemplate, client: InferenceClient, clock,
              parallelism: int = 1,
              on_pair=None) -> tuple[list[EligibilityAssessment], list[PairError]]:
    """Assess every pair once under a bounded worker pool.

    Results are collected in trial input order, so output is independent of
    parallelism degree and completion order. Per-pair failures become
    PairError records, never batch failures.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")

    def one(trial: CandidateTrial):
        try:
            assessment, exchanges = assess_pair(report, trial, ptee, client, clock)
            return trial, assessment, exchanges, None
        except TrialMatchError as exc:
            return trial, None, [], exc

    assessments: list[EligibilityAssessment] = []
    errors: list[PairError] = []
    if not trials:
        return assessments, errors

    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        for trial, assessment, exchanges, exc in pool.map(one, trials):
            if exc is not None:
                errors.append(PairError(trial.nct_id, type(exc).__name__, str(exc)))
                logger.warning("pair %s/%s failed: %s", report.patient_id,
                               trial.nct_id, exc)
            else:
                assessments.append(assessment)
            if on_pair is not None:
                on_pair(trial, assessment, exchanges, exc)
    return assessments, errors
