"""Patient-to-trial matching pipeline.

Four steps: extract a structured patient report from clinical documents,
retrieve candidate trials from the public registry with recall-biased
multi-tier searches, assess each patient-trial pair with a reasoning model,
and emit auditable structured and human-readable reports.
"""

from .eligibility import (
    ConfidenceLevel,
    EligibilityAssessment,
    EligibilityStatus,
    assess_pair,
    consistency_check,
    derive_status,
    run_batch,
)
from .errors import TrialMatchError
from .extraction import FieldValue, PatientReport, extract_patient_report, validate_report
from .inference import InferenceClient, InferenceConfig, ReplayBackend, split_reasoning
from .ingest import DocumentBundle, load_patient_dir, normalize_bundle
from .pipeline import PipelineConfig, load_config, run_pipeline
from .reports import BatchSummary, render_human_report, summarize_batch
from .retrieval import (
    CandidateTrial,
    MinimumCriteria,
    QueryPlan,
    build_query_plan,
    execute_plan,
    summarize_retrieval,
)
from .templating import PromptTemplate, TemplateRegistry, render

__version__ = "0.1.0"

__all__ = [
    "BatchSummary",
    "CandidateTrial",
    "ConfidenceLevel",
    "DocumentBundle",
    "EligibilityAssessment",
    "EligibilityStatus",
    "FieldValue",
    "InferenceClient",
    "InferenceConfig",
    "MinimumCriteria",
    "PatientReport",
    "PipelineConfig",
    "PromptTemplate",
    "QueryPlan",
    "ReplayBackend",
    "TemplateRegistry",
    "TrialMatchError",
    "assess_pair",
    "build_query_plan",
    "consistency_check",
    "derive_status",
    "execute_plan",
    "extract_patient_report",
    "load_config",
    "load_patient_dir",
    "normalize_bundle",
    "render",
    "render_human_report",
    "run_batch",
    "run_pipeline",
    "split_reasoning",
    "summarize_batch",
    "summarize_retrieval",
    "validate_report",
]
