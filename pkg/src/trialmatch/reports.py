"""Step 4: canonical structured files, human-readable reports, batch statistics.

Structured JSON files are the source of truth; Markdown and HTML renderings
are regenerated from them and never parsed back. Reports put the overall
verdict first and the evidence after it.
"""

from __future__ import annotations

import csv
import html
import io
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .common import format_timestamp, write_canonical_json
from .eligibility import CriterionAssessment, EligibilityAssessment, EligibilityStatus

SECTION_TITLES = (
    "Assessment Metadata",
    "Eligibility Summary",
    "Primary Criteria",
    "Clinical Criteria",
    "Exclusion Criteria",
    "Actionable Recommendations",
    "Missing Data Points",
    "QA Checklist",
    "Appendix: Reasoning Trace",
)


class ReportFormat(str, Enum):
    STRUCTURED = "Structured"
    MARKDOWN = "Markdown"
    HTML = "Html"


@dataclass(frozen=True)
class ReportDocument:
    patient_id: str
    trial_id: str
    format: ReportFormat
    body: str
    generated_at: str


def emit_structured(assessment: EligibilityAssessment, path: Path) -> Path:
    """Write the canonical JSON form; equal assessments give identical bytes."""
    return write_canonical_json(path, assessment.to_document())


def _metadata_lines(assessment: EligibilityAssessment) -> list[tuple[str, str]]:
    meta = assessment.assessment_metadata
    assessor = meta.assessor_information
    return [
        ("Assessment date", meta.assessment_date),
        ("Trial ID", meta.trial_id),
        ("Patient ID", meta.patient_id),
        ("Assessor model", assessor.model_name),
        ("PIE template version", assessor.pie_template_version),
        ("PTEE template version", assessor.ptee_template_version),
        ("Prompt digest", assessor.prompt_digest),
    ]


def _criteria_markdown(items: list[CriterionAssessment]) -> list[str]:
    if not items:
        return ["None", ""]
    lines: list[str] = []
    for item in items:
        lines.append(f"### {item.name_or_criterion}")
        lines.append(f"Status: **{item.status.value}**")
        lines.append("")
        lines.append(item.reasoning)
        lines.append("")
    return lines


def _string_list_markdown(items: list[str]) -> list[str]:
    if not items:
        return ["None", ""]
    return [f"- {item}" for item in items] + [""]


def render_markdown(assessment: EligibilityAssessment, generated_at: str) -> str:
    meta = assessment.assessment_metadata
    lines: list[str] = [
        f"# Eligibility Report: {meta.patient_id} / {meta.trial_id}",
        "",
        f"Generated: {generated_at}",
        "",
        f"## {SECTION_TITLES[0]}",
    ]
    for label, value in _metadata_lines(assessment):
        lines.append(f"- {label}: {value}")
    lines += [
        "",
        f"## {SECTION_TITLES[1]}",
        f"Status: **{assessment.eligibility_status.value}**",
        f"Confidence: **{assessment.confidence_level.value}**",
        "",
        assessment.summary,
        "",
        f"## {SECTION_TITLES[2]}",
    ]
    lines += _criteria_markdown(assessment.primary_criteria_assessment)
    lines.append(f"## {SECTION_TITLES[3]}")
    lines += _criteria_markdown(assessment.clinical_criteria_assessment)
    lines.append(f"## {SECTION_TITLES[4]}")
    lines += _criteria_markdown(assessment.exclusion_criteria_assessment)
    lines.append(f"## {SECTION_TITLES[5]}")
    lines += _string_list_markdown(assessment.actionable_recommendations)
    lines.append(f"## {SECTION_TITLES[6]}")
    lines += _string_list_markdown(assessment.missing_data_points)
    lines.append(f"## {SECTION_TITLES[7]}")
    if assessment.qa_checklist:
        for entry in assessment.qa_checklist:
            lines.append(f"- {entry.check} [{entry.result}]: {entry.note}")
        lines.append("")
    else:
        lines += ["None", ""]
    lines.append(f"## {SECTION_TITLES[8]}")
    lines.append(assessment.reasoning_trace if assessment.reasoning_trace else "None")
    lines.append("")
    return "\n".join(lines)


def _criteria_html(items: list[CriterionAssessment]) -> list[str]:
    if not items:
        return ["<p>None</p>"]
    parts = []
    for item in items:
        parts.append(f"<h3>{html.escape(item.name_or_criterion)}</h3>")
        parts.append(f"<p>Status: <strong>{html.escape(item.status.value)}</strong></p>")
        parts.append(f"<p>{html.escape(item.reasoning)}</p>")
    return parts


def _string_list_html(items: list[str]) -> list[str]:
    if not items:
        return ["<p>None</p>"]
    rows = "".join(f"<li>{html.escape(item)}</li>" for item in items)
    return [f"<ul>{rows}</ul>"]


def render_html(assessment: EligibilityAssessment, generated_at: str) -> str:
    meta = assessment.assessment_metadata
    title = f"Eligibility Report: {meta.patient_id} / {meta.trial_id}"
    parts: list[str] = [
        "<!DOCTYPE html>",
        '<html lang="en">',
        f'<head><meta charset="utf-8"><title>{html.escape(title)}</title>',
        "<style>body{font-family:sans-serif;max-width:60em;margin:2em auto;"
        "padding:0 1em;line-height:1.5}pre{white-space:pre-wrap}</style></head>",
        "<body>",
        f"<h1>{html.escape(title)}</h1>",
        f"<p>Generated: {html.escape(generated_at)}</p>",
        f"<h2>{SECTION_TITLES[0]}</h2>",
        "<ul>",
    ]
    for label, value in _metadata_lines(assessment):
        parts.append(f"<li>{html.escape(label)}: {html.escape(value)}</li>")
    parts += [
        "</ul>",
        f"<h2>{SECTION_TITLES[1]}</h2>",
        f"<p>Status: <strong>{html.escape(assessment.eligibility_status.value)}</strong><br>",
        f"Confidence: <strong>{html.escape(assessment.confidence_level.value)}</strong></p>",
        f"<p>{html.escape(assessment.summary)}</p>",
        f"<h2>{SECTION_TITLES[2]}</h2>",
    ]
    parts += _criteria_html(assessment.primary_criteria_assessment)
    parts.append(f"<h2>{SECTION_TITLES[3]}</h2>")
    parts += _criteria_html(assessment.clinical_criteria_assessment)
    parts.append(f"<h2>{SECTION_TITLES[4]}</h2>")
    parts += _criteria_html(assessment.exclusion_criteria_assessment)
    parts.append(f"<h2>{SECTION_TITLES[5]}</h2>")
    parts += _string_list_html(assessment.actionable_recommendations)
    parts.append(f"<h2>{SECTION_TITLES[6]}</h2>")
    parts += _string_list_html(assessment.missing_data_points)
    parts.append(f"<h2>{SECTION_TITLES[7]}</h2>")
    if assessment.qa_checklist:
        rows = "".join(
            f"<li>{html.escape(e.check)} [{html.escape(e.result)}]: {html.escape(e.note)}</li>"
            for e in assessment.qa_checklist
        )
        parts.append(f"<ul>{rows}</ul>")
    else:
        parts.append("<p>None</p>")
    parts.append(f"<h2>{SECTION_TITLES[8]}</h2>")
    trace = assessment.reasoning_trace
    parts.append(f"<pre>{html.escape(trace)}</pre>" if trace else "<p>None</p>")
    parts += ["</body>", "</html>", ""]
    return "\n".join(parts)


def render_human_report(assessment: EligibilityAssessment,
                        fmt: ReportFormat, clock) -> ReportDocument:
    """Render one assessment for reviewers; verdict first, evidence after."""
    generated_at = format_timestamp(clock.now())
    if fmt is ReportFormat.MARKDOWN:
        body = render_markdown(assessment, generated_at)
    elif fmt is ReportFormat.HTML:
        body = render_html(assessment, generated_at)
    else:
        raise ValueError("structured output goes through emit_structured")
    meta = assessment.assessment_metadata
    return ReportDocument(
        patient_id=meta.patient_id,
        trial_id=meta.trial_id,
        format=fmt,
        body=body,
        generated_at=generated_at,
    )


@dataclass(frozen=True)
class PatientRollup:
    patient_id: str
    candidate_count: int
    match_count: int


@dataclass(frozen=True)
class BatchSummary:
    total_assessments: int
    counts_by_status: dict[str, int]
    patients_with_match: int
    patients_total: int
    per_patient: tuple[PatientRollup, ...]

    def fractions_by_status(self) -> dict[str, float]:
        if self.total_assessments == 0:
            return {status.value: 0.0 for status in EligibilityStatus}
        return {
            status: round(count / self.total_assessments, 2)
            for status, count in self.counts_by_status.items()
        }

    def to_document(self) -> dict:
        return {
            "total_assessments": self.total_assessments,
            "counts_by_status": dict(self.counts_by_status),
            "fractions_by_status": self.fractions_by_status(),
            "patients_with_match": self.patients_with_match,
            "patients_total": self.patients_total,
            "per_patient": [
                {"patient_id": p.patient_id, "candidate_count": p.candidate_count,
                 "match_count": p.match_count}
                for p in self.per_patient
            ],
        }


def summarize_batch(assessments: list[EligibilityAssessment],
                    patients_total: int | None = None) -> BatchSummary:
    """Aggregate statuses across every patient-trial assessment.

    patients_total defaults to the number of distinct patients seen; pass it
    explicitly when some patients produced no assessments at all.
    """
    counts = {status.value: 0 for status in EligibilityStatus}
    per_patient: dict[str, list[int]] = {}
    for assessment in assessments:
        counts[assessment.eligibility_status.value] += 1
        pid = assessment.assessment_metadata.patient_id
        row = per_patient.setdefault(pid, [0, 0])
        row[0] += 1
        if assessment.eligibility_status is EligibilityStatus.ELIGIBLE_NOW:
            row[1] += 1
    rollups = tuple(
        PatientRollup(pid, row[0], row[1])
        for pid, row in sorted(per_patient.items())
    )
    with_match = sum(1 for r in rollups if r.match_count > 0)
    return BatchSummary(
        total_assessments=len(assessments),
        counts_by_status=counts,
        patients_with_match=with_match,
        patients_total=patients_total if patients_total is not None else len(rollups),
        per_patient=rollups,
    )


def render_summary_markdown(batch: BatchSummary, retrieval_summary: dict | None,
                            generated_at: str) -> str:
    lines = [
        "# Matching Run Summary",
        "",
        f"Generated: {generated_at}",
        "",
        "## Assessments",
        f"- Total assessments: {batch.total_assessments}",
        f"- Patients with at least one current match: "
        f"{batch.patients_with_match} of {batch.patients_total}",
        "",
        "## Status Distribution",
    ]
    fractions = batch.fractions_by_status()
    for status in EligibilityStatus:
        count = batch.counts_by_status.get(status.value, 0)
        lines.append(f"- {status.value}: {count} ({fractions.get(status.value, 0.0):.2f})")
    if retrieval_summary:
        lines += [
            "",
            "## Retrieval",
            f"- Patients searched: {retrieval_summary.get('patients', 0)}",
            f"- Mean candidate trials per patient: "
            f"{retrieval_summary.get('mean_total_unique', 0.0):.1f}",
            f"- Min / max: {retrieval_summary.get('min_total_unique', 0)} / "
            f"{retrieval_summary.get('max_total_unique', 0)}",
        ]
        ratio = retrieval_summary.get("expansion_ratio")
        lines.append(
            f"- Synonym expansion ratio: {ratio:.2f}" if ratio is not None
            else "- Synonym expansion ratio: n/a"
        )
    lines += ["", "## Per Patient"]
    if batch.per_patient:
        lines.append("| Patient | Assessed trials | Current matches |")
        lines.append("| --- | --- | --- |")
        for row in batch.per_patient:
            lines.append(f"| {row.patient_id} | {row.candidate_count} | {row.match_count} |")
    else:
        lines.append("None")
    lines.append("")
    return "\n".join(lines)


def render_summary_csv(batch: BatchSummary) -> str:
    """Per-patient rollup as delimited text for spreadsheet review."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["patient_id", "candidate_count", "match_count"])
    for row in batch.per_patient:
        writer.writerow([row.patient_id, row.candidate_count, row.match_count])
    return buffer.getvalue()
