"""End-to-end orchestration: ingest, extract, retrieve, assess, report.

Stage artifacts on disk are the resume checkpoints. The run manifest tracks
per-patient progress and is rewritten atomically after every stage, so a
killed run restarts at the first incomplete stage per patient. When both
backends replay, the clock is pinned and the whole output tree is
reproducible byte for byte.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

from .common import (
    FixedClock,
    SystemClock,
    digest_of,
    format_timestamp,
    read_json,
    write_canonical_json,
    write_text_atomic,
)
from .eligibility import EligibilityAssessment, run_batch
from .errors import (
    AbortRun,
    ConfigError,
    ConfigMismatch,
    TrialMatchError,
)
from .extraction import PatientReport, extract_patient_report
from .inference import InferenceClient, InferenceConfig, LiveBackend, ReplayBackend
from .ingest import load_patient_dir
from .reports import (
    ReportFormat,
    render_human_report,
    render_summary_csv,
    render_summary_markdown,
    summarize_batch,
)
from .retrieval import (
    CandidateTrial,
    LiveRegistryClient,
    MinimumCriteria,
    ReplayRegistryClient,
    RetrievalStats,
    TokenBucket,
    build_query_plan,
    execute_plan,
    summarize_retrieval,
)
from .templating import (
    CATEGORY_NAMES,
    PromptTemplate,
    TemplateRegistry,
    load_category_specs,
    load_shipped_templates,
    render,
)

logger = logging.getLogger(__name__)

STATE_DIR_NAME = ".runstate"
MANIFEST_NAME = "run_manifest.json"
RUN_LOG_NAME = "run_log.jsonl"

EXIT_OK = 0
EXIT_CONFIG_ERROR = 1
EXIT_PATIENT_FAILURES = 2


class Mode(str, Enum):
    LIVE = "live"
    REPLAY = "replay"


class Stage(str, Enum):
    PENDING = "Pending"
    EXTRACTED = "Extracted"
    RETRIEVED = "Retrieved"
    ASSESSED = "Assessed"
    REPORTED = "Reported"
    FAILED = "Failed"


STAGE_ORDER = (Stage.PENDING, Stage.EXTRACTED, Stage.RETRIEVED,
               Stage.ASSESSED, Stage.REPORTED)


@dataclass
class PipelineConfig:
    input_dir: Path
    output_dir: Path
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    minimum_criteria: MinimumCriteria = field(default_factory=MinimumCriteria)
    parallelism: int = 1
    patients_parallel: int = 1
    registry_mode: Mode = Mode.LIVE
    inference_mode: Mode = Mode.LIVE
    page_size: int = 100
    max_trials_cap: int = 5000
    rate_limit_per_sec: float = 2.0
    inference_transcript_dir: Path | None = None
    registry_fixture_dir: Path | None = None
    registry_cache_dir: Path | None = None
    registry_cache_bust: bool = False
    templates_dir: Path | None = None
    pie_version: str | None = None
    ptee_version: str | None = None

    def to_digest_document(self) -> dict:
        # operational knobs (parallelism, retries, timeouts, rate limits,
        # cache busting) and filesystem locations are excluded: changing
        # where a workspace sits or how fast it runs must not invalidate a
        # resume, only identity-bearing settings do
        return {
            "model_name": self.inference.model_name,
            "endpoint_url": self.inference.endpoint_url,
            "context_window_tokens": self.inference.context_window_tokens,
            "temperature": self.inference.temperature,
            "minimum_criteria": {
                "recruiting_only": self.minimum_criteria.recruiting_only,
                "country": self.minimum_criteria.country,
                "age_years": self.minimum_criteria.age_years,
                "sex": self.minimum_criteria.sex,
            },
            "registry_mode": self.registry_mode.value,
            "inference_mode": self.inference_mode.value,
            "page_size": self.page_size,
            "max_trials_cap": self.max_trials_cap,
            "pie_version": self.pie_version,
            "ptee_version": self.ptee_version,
        }


_KNOWN_KEYS = {
    "input_dir", "output_dir", "inference", "minimum_criteria", "parallelism",
    "patients_parallel", "registry_mode", "inference_mode", "page_size",
    "max_trials_cap", "rate_limit_per_sec", "inference_transcript_dir",
    "registry_fixture_dir", "registry_cache_dir", "registry_cache_bust",
    "templates_dir", "pie_version", "ptee_version",
}
_KNOWN_INFERENCE_KEYS = {
    "endpoint_url", "model_name", "context_window_tokens", "max_retries",
    "request_timeout_sec", "temperature",
}
_KNOWN_MINIMUM_KEYS = {"recruiting_only", "country", "age_years", "sex"}


def _resolve(base: Path, value: str | None) -> Path | None:
    if value is None:
        return None
    path = Path(value)
    return path if path.is_absolute() else (base / path)


def load_config(path: Path, overrides: dict | None = None) -> PipelineConfig:
    """Parse a JSON config file; relative paths resolve against its directory.

    TRIALMATCH_ENDPOINT_URL overrides the configured endpoint, keeping
    credentials and host names out of checked-in config files.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")

    unknown = sorted(set(doc) - _KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for key in ("input_dir", "output_dir"):
        if key not in doc or not isinstance(doc[key], str):
            raise ConfigError(f"config requires string key {key!r}")

    inference_doc = doc.get("inference", {})
    if not isinstance(inference_doc, dict):
        raise ConfigError("inference section must be an object")
    unknown = sorted(set(inference_doc) - _KNOWN_INFERENCE_KEYS)
    if unknown:
        raise ConfigError(f"unknown inference keys: {', '.join(unknown)}")
    minimum_doc = doc.get("minimum_criteria", {})
    if not isinstance(minimum_doc, dict):
        raise ConfigError("minimum_criteria section must be an object")
    unknown = sorted(set(minimum_doc) - _KNOWN_MINIMUM_KEYS)
    if unknown:
        raise ConfigError(f"unknown minimum_criteria keys: {', '.join(unknown)}")

    base = path.parent
    try:
        inference = InferenceConfig(
            endpoint_url=os.environ.get("TRIALMATCH_ENDPOINT_URL")
            or inference_doc.get("endpoint_url", ""),
            model_name=inference_doc.get("model_name", "deepseek-r1"),
            context_window_tokens=inference_doc.get("context_window_tokens", 128000),
            max_retries=inference_doc.get("max_retries", 2),
            request_timeout_sec=inference_doc.get("request_timeout_sec", 300.0),
            temperature=inference_doc.get("temperature", 0.0),
        )
        minimum = MinimumCriteria(
            recruiting_only=minimum_doc.get("recruiting_only", True),
            country=minimum_doc.get("country", "United States"),
            age_years=minimum_doc.get("age_years"),
            sex=minimum_doc.get("sex"),
        )
        config = PipelineConfig(
            input_dir=_resolve(base, doc["input_dir"]),
            output_dir=_resolve(base, doc["output_dir"]),
            inference=inference,
            minimum_criteria=minimum,
            parallelism=doc.get("parallelism", 1),
            patients_parallel=doc.get("patients_parallel", 1),
            registry_mode=Mode(doc.get("registry_mode", "live")),
            inference_mode=Mode(doc.get("inference_mode", "live")),
            page_size=doc.get("page_size", 100),
            max_trials_cap=doc.get("max_trials_cap", 5000),
            rate_limit_per_sec=doc.get("rate_limit_per_sec", 2.0),
            inference_transcript_dir=_resolve(base, doc.get("inference_transcript_dir")),
            registry_fixture_dir=_resolve(base, doc.get("registry_fixture_dir")),
            registry_cache_dir=_resolve(base, doc.get("registry_cache_dir")),
            registry_cache_bust=doc.get("registry_cache_bust", False),
            templates_dir=_resolve(base, doc.get("templates_dir")),
            pie_version=doc.get("pie_version"),
            ptee_version=doc.get("ptee_version"),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc

    if overrides:
        config = replace(config, **overrides)
    return config


def validate_config(config: PipelineConfig) -> list[str]:
    """Collect everything wrong with a config before any work begins."""
    problems = []
    if not config.input_dir.is_dir():
        problems.append(f"input_dir does not exist: {config.input_dir}")
    elif not any(p.is_dir() for p in config.input_dir.iterdir()):
        problems.append(f"input_dir has no patient directories: {config.input_dir}")
    if config.parallelism < 1 or config.patients_parallel < 1:
        problems.append("parallelism knobs must be >= 1")
    if config.page_size < 1 or config.max_trials_cap < 1:
        problems.append("page_size and max_trials_cap must be >= 1")
    if config.rate_limit_per_sec <= 0:
        problems.append("rate_limit_per_sec must be positive")
    if config.inference_mode is Mode.REPLAY:
        if config.inference_transcript_dir is None or not config.inference_transcript_dir.is_dir():
            problems.append("inference replay mode requires an existing inference_transcript_dir")
    else:
        if not config.inference.endpoint_url:
            problems.append("live inference mode requires inference.endpoint_url "
                            "(or TRIALMATCH_ENDPOINT_URL)")
    if config.registry_mode is Mode.REPLAY:
        if config.registry_fixture_dir is None or not config.registry_fixture_dir.is_dir():
            problems.append("registry replay mode requires an existing registry_fixture_dir")
    return problems


def compute_config_digest(config: PipelineConfig, pie: PromptTemplate,
                          ptee: PromptTemplate) -> str:
    """Run identity: identity-bearing config plus exact template bodies."""
    return digest_of({
        "config": config.to_digest_document(),
        "templates": {
            "pie": [pie.version, pie.body_digest()],
            "ptee": [ptee.version, ptee.body_digest()],
        },
    })


@dataclass
class PatientState:
    state: Stage
    last_completed: Stage
    reason: str | None = None

    def to_document(self) -> dict:
        doc = {"state": self.state.value, "last_completed": self.last_completed.value}
        if self.reason is not None:
            doc["reason"] = self.reason
        return doc

    @classmethod
    def from_document(cls, doc: dict) -> "PatientState":
        return cls(
            state=Stage(doc["state"]),
            last_completed=Stage(doc["last_completed"]),
            reason=doc.get("reason"),
        )


class RunManifest:
    """Per-patient stage ledger, rewritten atomically on every transition."""

    def __init__(self, path: Path, run_id: str, started_at: str,
                 config_digest: str, patients: dict[str, PatientState]):
        self.path = Path(path)
        self.run_id = run_id
        self.started_at = started_at
        self.config_digest = config_digest
        self.patients = patients
        self._lock = threading.Lock()

    @classmethod
    def new(cls, path: Path, run_id: str, started_at: str, config_digest: str,
            patient_ids: list[str]) -> "RunManifest":
        patients = {
            pid: PatientState(Stage.PENDING, Stage.PENDING) for pid in patient_ids
        }
        return cls(path, run_id, started_at, config_digest, patients)

    @classmethod
    def load(cls, path: Path) -> "RunManifest":
        doc = read_json(Path(path))
        patients = {
            pid: PatientState.from_document(state)
            for pid, state in doc["patients"].items()
        }
        return cls(Path(path), doc["run_id"], doc["started_at"],
                   doc["config_digest"], patients)

    def to_document(self) -> dict:
        return {
            "run_id": self.run_id,
            "started_at": self.started_at,
            "config_digest": self.config_digest,
            "patients": {pid: s.to_document() for pid, s in sorted(self.patients.items())},
        }

    def save(self):
        with self._lock:
            write_canonical_json(self.path, self.to_document())

    def advance(self, patient_id: str, stage: Stage):
        state = self.patients[patient_id]
        # stages never move backwards within a run
        if STAGE_ORDER.index(stage) <= STAGE_ORDER.index(state.last_completed):
            raise TrialMatchError(
                f"stage regression for {patient_id}: "
                f"{state.last_completed.value} -> {stage.value}"
            )
        state.state = stage
        state.last_completed = stage
        state.reason = None
        self.save()

    def fail(self, patient_id: str, reason: str):
        state = self.patients[patient_id]
        state.state = Stage.FAILED
        state.reason = reason
        self.save()

    def all_reported(self) -> bool:
        return all(s.state is Stage.REPORTED for s in self.patients.values())

    def any_failed(self) -> bool:
        return any(s.state is Stage.FAILED for s in self.patients.values())


class RunLog:
    """Append-only JSONL event stream shared by all workers."""

    def __init__(self, path: Path, clock):
        self.path = Path(path)
        self._clock = clock
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def write(self, patient_id: str, stage: str, event: str, digest: str = ""):
        record = {
            "timestamp": format_timestamp(self._clock.now()),
            "patient_id": patient_id,
            "stage": stage,
            "event": event,
            "digest": digest,
        }
        line = json.dumps(record, sort_keys=True, ensure_ascii=False)
        with self._lock:
            with self.path.open("a", encoding="utf-8") as handle:
                handle.write(line + "\n")

    def records(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [
            json.loads(line)
            for line in self.path.read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]


@dataclass
class _RunContext:
    config: PipelineConfig
    manifest: RunManifest
    log: RunLog
    client: InferenceClient
    registry: object
    pie: PromptTemplate
    ptee: PromptTemplate
    categories: tuple
    clock: object
    abort_hook: object = None


def _patient_dir(config: PipelineConfig, patient_id: str) -> Path:
    return config.output_dir / patient_id


def _stage_from_tag(tag: str | None) -> tuple[str, str]:
    if not tag:
        return "", ""
    parts = tag.split(":")
    if parts[0] == "extract":
        return parts[1], Stage.EXTRACTED.value
    if parts[0] == "assess":
        return parts[1], Stage.ASSESSED.value
    return "", ""


def build_backends(config: PipelineConfig, log: RunLog | None = None):
    """Construct the inference client and registry client for the run."""
    if config.inference_mode is Mode.REPLAY:
        backend = ReplayBackend(config.inference_transcript_dir)
    else:
        backend = LiveBackend(api_key=os.environ.get("TRIALMATCH_API_KEY"))

    def on_exchange(exchange, tag):
        if log is not None:
            patient_id, stage = _stage_from_tag(tag)
            log.write(patient_id, stage, "exchange", exchange.prompt_digest)

    client = InferenceClient(
        backend=backend,
        config=config.inference,
        in_flight_cap=config.parallelism,
        on_exchange=on_exchange,
    )
    if config.registry_mode is Mode.REPLAY:
        registry = ReplayRegistryClient(config.registry_fixture_dir)
    else:
        registry = LiveRegistryClient(
            rate_limiter=TokenBucket(config.rate_limit_per_sec),
            cache_dir=config.registry_cache_dir,
            cache_bust=config.registry_cache_bust,
        )
    return client, registry


def _extract_stage(ctx: _RunContext, patient_id: str) -> PatientReport:
    bundle = load_patient_dir(ctx.config.input_dir / patient_id)
    report, _ = extract_patient_report(bundle, ctx.pie, ctx.client,
                                       ctx.categories, ctx.clock)
    write_canonical_json(_patient_dir(ctx.config, patient_id) / "patient_report.json",
                         report.to_document())
    return report


def _load_report(ctx: _RunContext, patient_id: str) -> PatientReport:
    return PatientReport.from_document(
        read_json(_patient_dir(ctx.config, patient_id) / "patient_report.json")
    )


def _retrieve_stage(ctx: _RunContext, patient_id: str,
                    report: PatientReport) -> list[CandidateTrial]:
    plan = build_query_plan(report, ctx.config.minimum_criteria,
                            page_size=ctx.config.page_size,
                            max_trials_cap=ctx.config.max_trials_cap)
    trials, stats = execute_plan(plan, ctx.registry)
    patient_dir = _patient_dir(ctx.config, patient_id)
    trials_dir = patient_dir / "trials"
    trials_dir.mkdir(parents=True, exist_ok=True)
    for trial in trials:
        write_canonical_json(trials_dir / f"{trial.nct_id}.json", trial.to_document())
    write_canonical_json(patient_dir / "retrieval_stats.json", stats.to_document())
    return trials


def _load_trials(ctx: _RunContext, patient_id: str) -> list[CandidateTrial]:
    trials_dir = _patient_dir(ctx.config, patient_id) / "trials"
    if not trials_dir.is_dir():
        return []
    return [
        CandidateTrial.from_document(read_json(path))
        for path in sorted(trials_dir.glob("NCT*.json"))
    ]


def _assess_stage(ctx: _RunContext, patient_id: str, report: PatientReport,
                  trials: list[CandidateTrial]) -> list[EligibilityAssessment]:
    assessments, errors = run_batch(
        report, trials, ctx.ptee, ctx.client, ctx.clock,
        parallelism=ctx.config.parallelism,
    )
    patient_dir = _patient_dir(ctx.config, patient_id)
    assess_dir = patient_dir / "assessments"
    assess_dir.mkdir(parents=True, exist_ok=True)
    for assessment in assessments:
        write_canonical_json(
            assess_dir / f"{assessment.assessment_metadata.trial_id}.json",
            assessment.to_document(),
        )
    write_canonical_json(
        patient_dir / "assessment_errors.json",
        [e.to_document() for e in sorted(errors, key=lambda e: e.nct_id)],
    )
    return assessments


def _load_assessments(ctx: _RunContext, patient_id: str) -> list[EligibilityAssessment]:
    assess_dir = _patient_dir(ctx.config, patient_id) / "assessments"
    if not assess_dir.is_dir():
        return []
    return [
        EligibilityAssessment.from_document(read_json(path))
        for path in sorted(assess_dir.glob("NCT*.json"))
    ]


def _report_stage(ctx: _RunContext, patient_id: str,
                  assessments: list[EligibilityAssessment]):
    reports_dir = _patient_dir(ctx.config, patient_id) / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    for assessment in assessments:
        nct_id = assessment.assessment_metadata.trial_id
        for fmt, suffix in ((ReportFormat.MARKDOWN, "md"), (ReportFormat.HTML, "html")):
            doc = render_human_report(assessment, fmt, ctx.clock)
            write_text_atomic(reports_dir / f"{nct_id}.{suffix}", doc.body)


def _complete_stage(ctx: _RunContext, patient_id: str, stage: Stage):
    ctx.manifest.advance(patient_id, stage)
    ctx.log.write(patient_id, stage.value, "stage_completed")
    if ctx.abort_hook is not None:
        ctx.abort_hook(patient_id, stage)


def _process_patient(ctx: _RunContext, patient_id: str):
    state = ctx.manifest.patients[patient_id]
    done = STAGE_ORDER.index(state.last_completed)
    if state.last_completed is Stage.REPORTED:
        return
    try:
        if done < STAGE_ORDER.index(Stage.EXTRACTED):
            ctx.log.write(patient_id, Stage.EXTRACTED.value, "stage_started")
            report = _extract_stage(ctx, patient_id)
            _complete_stage(ctx, patient_id, Stage.EXTRACTED)
        else:
            report = _load_report(ctx, patient_id)

        if STAGE_ORDER.index(ctx.manifest.patients[patient_id].last_completed) \
                < STAGE_ORDER.index(Stage.RETRIEVED):
            ctx.log.write(patient_id, Stage.RETRIEVED.value, "stage_started")
            trials = _retrieve_stage(ctx, patient_id, report)
            _complete_stage(ctx, patient_id, Stage.RETRIEVED)
        else:
            trials = _load_trials(ctx, patient_id)

        if STAGE_ORDER.index(ctx.manifest.patients[patient_id].last_completed) \
                < STAGE_ORDER.index(Stage.ASSESSED):
            ctx.log.write(patient_id, Stage.ASSESSED.value, "stage_started")
            assessments = _assess_stage(ctx, patient_id, report, trials)
            _complete_stage(ctx, patient_id, Stage.ASSESSED)
        else:
            assessments = _load_assessments(ctx, patient_id)

        ctx.log.write(patient_id, Stage.REPORTED.value, "stage_started")
        _report_stage(ctx, patient_id, assessments)
        _complete_stage(ctx, patient_id, Stage.REPORTED)
    except AbortRun:
        raise
    except TrialMatchError as exc:
        reason = f"{type(exc).__name__}: {exc}"
        logger.error("patient %s failed: %s", patient_id, reason)
        ctx.manifest.fail(patient_id, reason)
        ctx.log.write(patient_id, ctx.manifest.patients[patient_id].last_completed.value,
                      "patient_failed")


def collect_corpus(output_dir: Path) -> tuple[list[EligibilityAssessment],
                                              list[RetrievalStats], list[str]]:
    """Reload every persisted assessment and retrieval stat under an out dir."""
    assessments: list[EligibilityAssessment] = []
    stats: list[RetrievalStats] = []
    patient_ids: list[str] = []
    for patient_dir in sorted(Path(output_dir).iterdir()):
        if not patient_dir.is_dir() or patient_dir.name == STATE_DIR_NAME:
            continue
        patient_ids.append(patient_dir.name)
        stats_path = patient_dir / "retrieval_stats.json"
        if stats_path.is_file():
            stats.append(RetrievalStats.from_document(read_json(stats_path)))
        assess_dir = patient_dir / "assessments"
        if assess_dir.is_dir():
            for path in sorted(assess_dir.glob("NCT*.json")):
                assessments.append(EligibilityAssessment.from_document(read_json(path)))
    return assessments, stats, patient_ids


def write_corpus_summary(output_dir: Path, patients_total: int, clock,
                         run_id: str = "") -> dict:
    """out/summary.json and out/summary.md across every patient."""
    assessments, stats, _ = collect_corpus(output_dir)
    batch = summarize_batch(assessments, patients_total=patients_total)
    retrieval = summarize_retrieval(stats)
    generated_at = format_timestamp(clock.now())
    doc = {
        "generated_at": generated_at,
        "run_id": run_id,
        "batch": batch.to_document(),
        "retrieval": retrieval,
    }
    write_canonical_json(Path(output_dir) / "summary.json", doc)
    write_text_atomic(Path(output_dir) / "summary.md",
                      render_summary_markdown(batch, retrieval, generated_at))
    return doc


def run_pipeline(config: PipelineConfig, resume_manifest: Path | None = None,
                 abort_hook=None, clock=None) -> tuple[RunManifest, int]:
    """Execute Steps 1-4 for every patient directory under input_dir.

    Exit code 0 when every patient reaches Reported, 2 when any failed.
    Configuration problems raise ConfigError before any output is written.
    """
    problems = validate_config(config)
    if problems:
        raise ConfigError("; ".join(problems))

    registry_templates: TemplateRegistry = load_shipped_templates(config.templates_dir)
    pie = (registry_templates.get("PIE", config.pie_version)
           if config.pie_version else registry_templates.latest("PIE"))
    ptee = (registry_templates.get("PTEE", config.ptee_version)
            if config.ptee_version else registry_templates.latest("PTEE"))
    categories = load_category_specs()
    config_digest = compute_config_digest(config, pie, ptee)

    if clock is None:
        replay_only = (config.inference_mode is Mode.REPLAY
                       and config.registry_mode is Mode.REPLAY)
        clock = FixedClock() if replay_only else SystemClock()

    config.output_dir.mkdir(parents=True, exist_ok=True)
    state_dir = config.output_dir / STATE_DIR_NAME
    state_dir.mkdir(exist_ok=True)
    manifest_path = state_dir / MANIFEST_NAME

    patient_ids = sorted(
        p.name for p in config.input_dir.iterdir() if p.is_dir()
    )
    if resume_manifest is not None:
        manifest = RunManifest.load(Path(resume_manifest))
        if manifest.config_digest != config_digest:
            raise ConfigMismatch(
                "resume refused: config digest "
                f"{manifest.config_digest[:12]} does not match {config_digest[:12]}"
            )
        manifest.path = manifest_path
        for pid in patient_ids:
            if pid not in manifest.patients:
                manifest.patients[pid] = PatientState(Stage.PENDING, Stage.PENDING)
    else:
        manifest = RunManifest.new(
            manifest_path,
            run_id=f"run-{config_digest[:12]}",
            started_at=format_timestamp(clock.now()),
            config_digest=config_digest,
            patient_ids=patient_ids,
        )
    manifest.save()

    log = RunLog(state_dir / RUN_LOG_NAME, clock)
    log.write("", "", "run_started", config_digest)
    client, registry_client = build_backends(config, log)
    ctx = _RunContext(
        config=config, manifest=manifest, log=log, client=client,
        registry=registry_client, pie=pie, ptee=ptee, categories=categories,
        clock=clock, abort_hook=abort_hook,
    )

    todo = [pid for pid in sorted(manifest.patients)
            if manifest.patients[pid].last_completed is not Stage.REPORTED]
    if config.patients_parallel == 1:
        for pid in todo:
            _process_patient(ctx, pid)
    else:
        with ThreadPoolExecutor(max_workers=config.patients_parallel) as pool:
            futures = [pool.submit(_process_patient, ctx, pid) for pid in todo]
            aborts = []
            for future in futures:
                try:
                    future.result()
                except AbortRun as exc:
                    aborts.append(exc)
            if aborts:
                raise aborts[0]

    write_corpus_summary(config.output_dir, patients_total=len(manifest.patients),
                         clock=clock, run_id=manifest.run_id)
    log.write("", "", "run_completed", config_digest)
    exit_code = EXIT_OK if manifest.all_reported() else EXIT_PATIENT_FAILURES
    return manifest, exit_code


def summarize_output_dir(output_dir: Path, clock=None) -> dict:
    """Regenerate corpus summaries plus delimited and graphical rollups."""
    from .figures import save_candidates_per_patient, save_status_distribution

    output_dir = Path(output_dir)
    if not output_dir.is_dir():
        raise ConfigError(f"output directory not found: {output_dir}")
    clock = clock or SystemClock()
    assessments, stats, patient_ids = collect_corpus(output_dir)
    batch = summarize_batch(assessments, patients_total=len(patient_ids))
    retrieval = summarize_retrieval(stats)
    generated_at = format_timestamp(clock.now())
    doc = {
        "generated_at": generated_at,
        "run_id": "",
        "batch": batch.to_document(),
        "retrieval": retrieval,
    }
    write_canonical_json(output_dir / "summary.json", doc)
    write_text_atomic(output_dir / "summary.md",
                      render_summary_markdown(batch, retrieval, generated_at))
    write_text_atomic(output_dir / "summary.csv", render_summary_csv(batch))
    save_status_distribution(batch, output_dir / "figures" / "status_distribution.png")
    save_candidates_per_patient(batch, output_dir / "figures" / "candidates_per_patient.png")
    return doc


def validate_templates(templates_dir: Path | None = None) -> list[str]:
    """Static and render-time checks over the shipped or given templates."""
    problems: list[str] = []
    try:
        registry = load_shipped_templates(templates_dir)
    except TrialMatchError as exc:
        return [f"template load failed: {exc}"]
    try:
        categories = load_category_specs()
    except TrialMatchError as exc:
        return [f"category definitions failed: {exc}"]

    try:
        pie = registry.latest("PIE")
        rendered = render(pie, {
            "categories": [c.to_context() for c in categories],
            "patient_id": "SAMPLE",
            "documents": "===== DOCUMENT sample (PlainText) =====\nSample note.",
        })
        for name in CATEGORY_NAMES:
            if name not in rendered.text:
                problems.append(f"PIE {pie.version}: category {name!r} missing from render")
    except TrialMatchError as exc:
        problems.append(f"PIE: {exc}")

    try:
        ptee = registry.latest("PTEE")
        rendered = render(ptee, {
            "patient_id": "SAMPLE",
            "patient_fields": [{"name": "Primary Diagnosis", "value": "sample"}],
            "nct_id": "NCT00000000",
            "trial_title": "Sample",
            "description": "Sample",
            "inclusion_criteria": "Sample",
            "exclusion_criteria": "Sample",
        })
        from .eligibility import ConfidenceLevel, EligibilityStatus
        for status in EligibilityStatus:
            if status.value not in rendered.text:
                problems.append(
                    f"PTEE {ptee.version}: status string {status.value!r} missing"
                )
        for level in ConfidenceLevel:
            if level.value not in rendered.text:
                problems.append(
                    f"PTEE {ptee.version}: confidence {level.value!r} missing"
                )
    except TrialMatchError as exc:
        problems.append(f"PTEE: {exc}")
    return problems
