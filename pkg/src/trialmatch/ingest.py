"""Heterogeneous clinical document ingest and per-patient bundle normalization.

Input documents arrive as free text, markdown tables, PDF-extracted layouts,
or key-value notes. This module classifies each document, normalizes line
endings, and concatenates a patient's documents into one prompt-ready text
block with unambiguous separators.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from .errors import (
    DuplicateDocument,
    EmptyBundle,
    EmptyInput,
    IngestError,
    MixedPatient,
)

MANIFEST_FILENAME = "manifest.json"

SEPARATOR_PREFIX = "===== DOCUMENT "

# key: value lines, e.g. "Diagnosis: Hodgkin lymphoma"
_KEY_VALUE_RE = re.compile(r"^\s*[^:\s][^:]{0,79}:\s.+$")
# pipe-delimited table row, e.g. "| ANC | 1.8 |"
_TABLE_ROW_RE = re.compile(r"^\s*\|.+\|\s*$")
# markdown table separator row, e.g. "|---|---|" or "| :--- | ---: |"
_TABLE_SEPARATOR_RE = re.compile(r"^\s*\|(?:\s*:?-+:?\s*\|)+\s*$")
# runs of 2+ spaces (columnar PDF text extraction artifact)
_MULTI_SPACE_RUN_RE = re.compile(r" {2,}")


class SourceFormat(str, Enum):
    PLAIN_TEXT = "PlainText"
    MARKDOWN_TABLE = "MarkdownTable"
    PDF_TEXT_LAYOUT = "PdfTextLayout"
    STRUCTURED_KEY_VALUE = "StructuredKeyValue"


@dataclass(frozen=True)
class RawDocument:
    """One ingested document, line-ending normalized, form feeds removed."""

    doc_id: str
    patient_id: str
    source_format: SourceFormat
    content: str
    byte_length: int


@dataclass(frozen=True)
class DocumentBundle:
    """All of a patient's documents concatenated for prompt rendering."""

    patient_id: str
    documents: tuple[RawDocument, ...]
    normalized_text: str
    total_tokens_estimate: int


def detect_format(content: str) -> SourceFormat:
    """Classify raw document text into one of the four source formats.

    Deterministic rule order: StructuredKeyValue (>=50% of non-blank lines
    are "key: value"), then MarkdownTable (a pipe row plus a separator row),
    then PdfTextLayout (form feeds, or >=3 runs of 2+ spaces on >=30% of
    non-blank lines), else PlainText.
    """
    if not content or not content.strip():
        raise EmptyInput("document content is empty or whitespace-only")

    lines = content.splitlines()
    nonblank = [line for line in lines if line.strip()]

    key_value = sum(1 for line in nonblank if _KEY_VALUE_RE.match(line))
    if key_value * 2 >= len(nonblank):
        return SourceFormat.STRUCTURED_KEY_VALUE

    has_row = any(_TABLE_ROW_RE.match(line) for line in nonblank)
    has_separator = any(_TABLE_SEPARATOR_RE.match(line) for line in nonblank)
    if has_row and has_separator:
        return SourceFormat.MARKDOWN_TABLE

    if "\f" in content:
        return SourceFormat.PDF_TEXT_LAYOUT
    columnar = sum(
        1 for line in nonblank if len(_MULTI_SPACE_RUN_RE.findall(line)) >= 3
    )
    if nonblank and columnar * 10 >= len(nonblank) * 3:
        return SourceFormat.PDF_TEXT_LAYOUT

    return SourceFormat.PLAIN_TEXT


def normalize_content(text: str) -> str:
    """Normalize line endings to LF and drop form feeds."""
    return text.replace("\r\n", "\n").replace("\r", "\n").replace("\f", "")


def make_document(doc_id: str, patient_id: str, raw_text: str,
                  declared_format: SourceFormat | None = None) -> RawDocument:
    """Build a RawDocument: classify on the raw text, then normalize it."""
    source_format = declared_format or detect_format(raw_text)
    content = normalize_content(raw_text)
    if not content.strip():
        raise EmptyInput(f"document {doc_id!r} is empty after normalization")
    return RawDocument(
        doc_id=doc_id,
        patient_id=patient_id,
        source_format=source_format,
        content=content,
        byte_length=len(content.encode("utf-8")),
    )


def separator_line(doc: RawDocument) -> str:
    return f"{SEPARATOR_PREFIX}{doc.doc_id} ({doc.source_format.value}) ====="


def normalize_bundle(documents: list[RawDocument]) -> DocumentBundle:
    """Concatenate a patient's documents, in input order, behind separator lines."""
    if not documents:
        raise EmptyBundle("no documents to bundle")
    patient_ids = {doc.patient_id for doc in documents}
    if len(patient_ids) > 1:
        raise MixedPatient(f"bundle mixes patient ids: {sorted(patient_ids)}")
    seen: set[str] = set()
    for doc in documents:
        if doc.doc_id in seen:
            raise DuplicateDocument(f"duplicate doc_id {doc.doc_id!r} in bundle")
        seen.add(doc.doc_id)

    parts = [f"{separator_line(doc)}\n{doc.content}" for doc in documents]
    normalized_text = "\n".join(parts)
    # token estimate covers document content only, not the separator scaffolding
    content_chars = sum(len(doc.content) for doc in documents)
    return DocumentBundle(
        patient_id=patient_ids.pop(),
        documents=tuple(documents),
        normalized_text=normalized_text,
        total_tokens_estimate=(content_chars + 3) // 4,
    )


def _load_manifest(patient_dir: Path) -> dict[str, SourceFormat]:
    """Read the optional sidecar manifest mapping doc_id to a declared format."""
    manifest_path = patient_dir / MANIFEST_FILENAME
    if not manifest_path.exists():
        return {}
    try:
        records = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestError(f"unreadable manifest {manifest_path}: {exc}") from exc
    if not isinstance(records, list):
        raise IngestError(f"manifest {manifest_path} must be a JSON array of records")
    declared: dict[str, SourceFormat] = {}
    for record in records:
        try:
            declared[record["doc_id"]] = SourceFormat(record["format"])
        except (TypeError, KeyError, ValueError) as exc:
            raise IngestError(
                f"manifest {manifest_path} record {record!r}: "
                "expected {'doc_id': ..., 'format': <SourceFormat>}"
            ) from exc
    return declared


def load_patient_dir(patient_dir: Path) -> DocumentBundle:
    """Ingest one patient directory: each text file becomes a document.

    The directory name is the patient_id and each file stem is its doc_id.
    Files are read in sorted name order; a sidecar manifest.json may declare
    formats that override detection.
    """
    patient_dir = Path(patient_dir)
    if not patient_dir.is_dir():
        raise IngestError(f"patient directory not found: {patient_dir}")
    patient_id = patient_dir.name
    declared = _load_manifest(patient_dir)

    documents: list[RawDocument] = []
    for path in sorted(patient_dir.iterdir()):
        if not path.is_file() or path.name == MANIFEST_FILENAME or path.name.startswith("."):
            continue
        try:
            raw_text = path.read_text(encoding="utf-8")
        except UnicodeDecodeError as exc:
            raise IngestError(f"{path} is not valid UTF-8: {exc}") from exc
        documents.append(
            make_document(path.stem, patient_id, raw_text, declared.get(path.stem))
        )
    if not documents:
        raise EmptyBundle(f"no documents found in {patient_dir}")
    return normalize_bundle(documents)
