"""Versioned prompt templates and deterministic rendering.

Two templates drive the pipeline: PIE (patient information extraction) and
PTEE (patient-trial eligibility evaluation). Template bodies live in files
whose first line is ``#template: <id> <version>``; rendering substitutes a
JSON-serializable context and records a digest of that context for audit.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from datetime import datetime
from importlib import resources
from pathlib import Path

import jinja2
from jinja2 import meta

from .common import digest_of, read_json, sha256_hex
from .errors import (
    DuplicateVersion,
    MalformedBody,
    MissingVariable,
    RenderOverflow,
    TemplateError,
)

TEMPLATE_HEADER_RE = re.compile(r"^#template:\s*(\S+)\s+(\S+)\s*$")
SEMVER_RE = re.compile(r"^\d+\.\d+\.\d+$")

# Clinical data categories extracted by the PIE template, in canonical order:
# (display name, report field key).
TABLE1_CATEGORIES: tuple[tuple[str, str], ...] = (
    ("Primary Diagnosis", "primary_diagnosis"),
    ("Base Diagnosis", "base_diagnosis"),
    ("Diagnosis Synonyms", "diagnosis_synonyms"),
    ("Patient Demographics", "patient_demographics"),
    ("Current Interventions", "current_interventions"),
    ("Treatment History", "treatment_history"),
    ("Search Terms", "search_terms"),
    ("Biomarkers / Molecular Profile", "biomarkers"),
    ("Performance Status", "performance_status"),
    ("Laboratory Values", "laboratory_values"),
    ("Comorbidities", "comorbidities"),
    ("Family History", "family_history"),
    ("Treatment Goals", "treatment_goals"),
    ("Eligibility Factors", "eligibility_factors"),
)

CATEGORY_NAMES = tuple(name for name, _ in TABLE1_CATEGORIES)
CATEGORY_KEYS = tuple(key for _, key in TABLE1_CATEGORIES)


def _jinja_env() -> jinja2.Environment:
    return jinja2.Environment(
        undefined=jinja2.StrictUndefined,
        trim_blocks=True,
        lstrip_blocks=True,
        keep_trailing_newline=True,
        autoescape=False,
    )


_ENV = _jinja_env()


@dataclass(frozen=True)
class PromptTemplate:
    """A versioned prompt body with named placeholders and loop blocks."""

    template_id: str  # "PIE" or "PTEE"
    version: str
    body: str
    required_variables: frozenset[str]

    def body_digest(self) -> str:
        return sha256_hex(self.body)


@dataclass(frozen=True)
class RenderedPrompt:
    """The exact prompt text produced for one inference call."""

    template_id: str
    template_version: str
    text: str
    rendered_at: datetime | None
    context_digest: str

    @property
    def prompt_digest(self) -> str:
        """Digest of the prompt text itself; keys replay transcripts."""
        return sha256_hex(self.text)


@dataclass(frozen=True)
class CategorySpec:
    """Definition, examples, and extraction rules for one clinical category."""

    name: str
    key: str
    definition: str
    examples: tuple[str, ...]
    rules: tuple[str, ...]

    def to_context(self) -> dict:
        return {
            "name": self.name,
            "key": self.key,
            "definition": self.definition,
            "examples": list(self.examples),
            "rules": list(self.rules),
        }


def _static_variables(body: str) -> frozenset[str]:
    """Variables a body references, found by static analysis of its AST."""
    try:
        ast = _ENV.parse(body)
    except jinja2.TemplateSyntaxError as exc:
        raise MalformedBody(f"template body does not parse: {exc}") from exc
    return frozenset(meta.find_undeclared_variables(ast))


def make_template(template_id: str, version: str, body: str,
                  required_variables: frozenset[str] | None = None) -> PromptTemplate:
    """Build a template, deriving required_variables from the body if omitted."""
    if not SEMVER_RE.match(version):
        raise TemplateError(f"version {version!r} is not MAJOR.MINOR.PATCH")
    referenced = _static_variables(body)
    if required_variables is None:
        required_variables = referenced
    undeclared = referenced - required_variables
    if undeclared:
        raise MalformedBody(
            "body references undeclared variables: " + ", ".join(sorted(undeclared))
        )
    return PromptTemplate(
        template_id=template_id,
        version=version,
        body=body,
        required_variables=frozenset(required_variables),
    )


class TemplateRegistry:
    """In-memory store of templates keyed by (template_id, version)."""

    def __init__(self):
        self._templates: dict[tuple[str, str], PromptTemplate] = {}

    def register(self, template: PromptTemplate) -> tuple[str, str]:
        # re-validate so hand-built PromptTemplate instances get the same checks
        undeclared = _static_variables(template.body) - template.required_variables
        if undeclared:
            raise MalformedBody(
                "body references undeclared variables: " + ", ".join(sorted(undeclared))
            )
        key = (template.template_id, template.version)
        if key in self._templates:
            raise DuplicateVersion(f"template {key} already registered")
        self._templates[key] = template
        return key

    def get(self, template_id: str, version: str) -> PromptTemplate:
        try:
            return self._templates[(template_id, version)]
        except KeyError:
            raise TemplateError(f"no template ({template_id}, {version})") from None

    def latest(self, template_id: str) -> PromptTemplate:
        candidates = [
            t for (tid, _), t in self._templates.items() if tid == template_id
        ]
        if not candidates:
            raise TemplateError(f"no versions registered for {template_id}")
        return max(candidates, key=lambda t: tuple(int(p) for p in t.version.split(".")))

    def __len__(self) -> int:
        return len(self._templates)


def render(template: PromptTemplate, context: dict, *,
           max_chars: int | None = None,
           rendered_at: datetime | None = None) -> RenderedPrompt:
    """Render a template over a JSON-serializable context.

    Deterministic for a fixed (template, context); the context digest is
    computed over a key-sorted serialization, so insertion order of the
    context mapping never changes it.
    """
    missing = sorted(template.required_variables - set(context))
    if missing:
        raise MissingVariable(missing[0])
    try:
        text = _ENV.from_string(template.body).render(**context)
    except jinja2.UndefinedError as exc:
        raise MissingVariable(str(exc)) from exc
    if max_chars is not None and len(text) > max_chars:
        raise RenderOverflow(
            f"rendered prompt is {len(text)} chars, bound is {max_chars}"
        )
    return RenderedPrompt(
        template_id=template.template_id,
        template_version=template.version,
        text=text,
        rendered_at=rendered_at,
        context_digest=digest_of(context),
    )


def load_template_file(path: Path) -> PromptTemplate:
    """Load a template file: header line, then the body."""
    text = Path(path).read_text(encoding="utf-8")
    first_line, _, body = text.partition("\n")
    match = TEMPLATE_HEADER_RE.match(first_line)
    if not match:
        raise MalformedBody(
            f"{path}: first line must be '#template: <id> <version>', got {first_line!r}"
        )
    template_id, version = match.groups()
    return make_template(template_id, version, body)


def _default_data_path(filename: str) -> Path:
    return Path(str(resources.files("trialmatch").joinpath("templates", filename)))


def load_shipped_templates(templates_dir: Path | None = None) -> TemplateRegistry:
    """Register the shipped PIE and PTEE templates (or a directory's overrides)."""
    registry = TemplateRegistry()
    if templates_dir is not None:
        paths = sorted(Path(templates_dir).glob("*.tmpl"))
        if not paths:
            raise TemplateError(f"no *.tmpl files in {templates_dir}")
    else:
        paths = [_default_data_path("pie.tmpl"), _default_data_path("ptee.tmpl")]
    for path in paths:
        registry.register(load_template_file(path))
    return registry


def load_category_specs(path: Path | None = None) -> tuple[CategorySpec, ...]:
    """Load the 14 clinical category specs and verify names/keys are canonical."""
    path = Path(path) if path is not None else _default_data_path("categories.json")
    records = read_json(path)
    if not isinstance(records, list):
        raise TemplateError(f"{path}: expected a JSON array of category records")
    specs = tuple(
        CategorySpec(
            name=rec["name"],
            key=rec["key"],
            definition=rec["definition"],
            examples=tuple(rec.get("examples", [])),
            rules=tuple(rec.get("rules", [])),
        )
        for rec in records
    )
    names = tuple(spec.name for spec in specs)
    keys = tuple(spec.key for spec in specs)
    if names != CATEGORY_NAMES or keys != CATEGORY_KEYS:
        raise TemplateError(
            f"{path}: category names/keys must match the 14 canonical categories in order"
        )
    return specs
