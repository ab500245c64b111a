"""Shared test corpus: two synthetic patients, recorded registry pages, and
recorded model transcripts keyed exactly the way the replay backends key them.

Expected values asserted in tests are hard-coded there; this module only
manufactures the inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from trialmatch.common import pretty_json, sha256_hex, write_text_atomic
from trialmatch.eligibility import (
    AssessmentMetadata,
    AssessorInformation,
    EligibilityAssessment,
    consistency_check,
    render_pair_prompt,
    validate_assessment,
)
from trialmatch.extraction import (
    ExtractionMetadata,
    PatientReport,
    render_extraction_prompt,
    validate_report,
)
from trialmatch.ingest import load_patient_dir
from trialmatch.retrieval import (
    CandidateTrial,
    MinimumCriteria,
    QueryPlan,
    ReplayRegistryClient,
    build_query_plan,
    execute_plan,
    request_digest,
    tier_request_params,
)
from trialmatch.templating import load_category_specs, load_shipped_templates

PANC = "P001"
HODG = "P002"
FAILING = "P003"

ARTIA_NCT = "NCT05764720"
ELIGIBLE_NCT = "NCT01234567"
HODG_NE_NCT = "NCT02222222"
HODG_NMI_NCT = "NCT03333333"
FEMALE_ONLY_NCT = "NCT04444444"
CLOSED_NCT = "NCT06111111"

PANC_DOCS = {
    "01_oncology_note": (
        "ONCOLOGY CONSULTATION\n"
        "\n"
        "Diagnosis: Borderline resectable pancreatic adenocarcinoma, T2N1M0, Stage IIB.\n"
        "\n"
        "Mr. Harlan is a 62 year old man referred after cross-sectional imaging showed\n"
        "a 3.1 cm mass in the pancreatic head abutting the superior mesenteric vein.\n"
        "Endoscopic ultrasound biopsy confirmed ductal adenocarcinoma. He started\n"
        "FOLFIRINOX two weeks ago and has completed one cycle so far without dose\n"
        "reduction. The plan is neoadjuvant chemotherapy followed by reassessment\n"
        "for curative-intent resection. He lives in New York, ZIP 10001.\n"
        "\n"
        "Past medical history is notable for type 2 diabetes mellitus on metformin.\n"
        "He denies prior abdominal radiation and has had no other cancer-directed\n"
        "therapy. Family history was not obtained at this visit.\n"
    ),
    "02_labs": (
        "Patient: Harlan, R\n"
        "Age: 62\n"
        "Sex: Male\n"
        "CA 19-9: 820 U/mL\n"
        "Total bilirubin: 1.1 mg/dL\n"
        "Absolute neutrophil count: 1800 /uL\n"
        "Creatinine: 0.9 mg/dL\n"
        "Collection date: prior to cycle 2\n"
    ),
    "03_medications": (
        "Active oncology medications\n"
        "\n"
        "| Medication | Regimen | Started |\n"
        "| --- | --- | --- |\n"
        "| FOLFIRINOX | biweekly, cycle 1 of 6 planned | two weeks ago |\n"
        "| Metformin | 1000 mg twice daily | longstanding |\n"
    ),
}

HODG_DOCS = {
    "01_hematology_note": (
        "HEMATOLOGY NEW PATIENT NOTE\n"
        "\n"
        "Diagnosis: Classical Hodgkin lymphoma, nodular sclerosis subtype, Stage IIA.\n"
        "\n"
        "Ms. Okafor is a 28 year old woman presenting with painless cervical\n"
        "lymphadenopathy. Excisional biopsy demonstrated nodular sclerosis classical\n"
        "Hodgkin lymphoma, EBV-negative. PET-CT shows disease limited to cervical and\n"
        "mediastinal nodal stations without B symptoms. She is treatment-naive and\n"
        "fully active (ECOG 0). She lives in Cambridge, ZIP 02139. Goal is curative\n"
        "combined-modality therapy. No hematologic malignancy in first-degree\n"
        "relatives.\n"
    ),
    "02_vitals": (
        "Age: 28\n"
        "Sex: Female\n"
        "Hemoglobin: 12.8 g/dL\n"
        "ECOG: 0\n"
        "Weight: 61 kg\n"
    ),
}

FAILING_DOCS = {
    "01_fragment": (
        "Telephone triage fragment. Caller reports a relative was recently seen at an\n"
        "outside hospital for an unspecified mass. No records are available yet, and\n"
        "no diagnosis has been communicated to the caller.\n"
    ),
}


def pie_answer_panc() -> dict:
    return {
        "primary_diagnosis": "Borderline resectable pancreatic adenocarcinoma (T2N1M0 Stage IIB)",
        "base_diagnosis": "Pancreatic adenocarcinoma",
        "diagnosis_synonyms": ["Pancreatic cancer", "Pancreatic ductal adenocarcinoma"],
        "patient_demographics": {"age": 62, "sex": "Male", "zip_code": "10001"},
        "current_interventions": ["FOLFIRINOX chemotherapy"],
        "treatment_history": ["FOLFIRINOX started two weeks ago, cycle 1 of 6 planned"],
        "search_terms": ["Pancreatic neoplasms", "Gastrointestinal malignancy"],
        "biomarkers": ["CA 19-9 elevated at 820 U/mL"],
        "performance_status": "Need more info",
        "laboratory_values": ["Total bilirubin 1.1 mg/dL",
                              "Absolute neutrophil count 1800 /uL"],
        "comorbidities": ["Type 2 diabetes mellitus"],
        "family_history": "Need more info",
        "treatment_goals": "Neoadjuvant chemotherapy followed by curative-intent resection",
        "eligibility_factors": ["Currently receiving first-line chemotherapy",
                                "No prior abdominal radiation"],
    }


def pie_answer_hodg() -> dict:
    return {
        "primary_diagnosis": "Classical Hodgkin lymphoma, nodular sclerosis subtype, Stage IIA",
        "base_diagnosis": "Hodgkin lymphoma",
        "diagnosis_synonyms": ["Hodgkin disease"],
        "patient_demographics": {"age": 28, "sex": "Female", "zip_code": "02139"},
        "current_interventions": "Need more info",
        "treatment_history": [],
        "search_terms": ["Lymphoma"],
        "biomarkers": ["EBV-negative"],
        "performance_status": "ECOG 0",
        "laboratory_values": ["Hemoglobin 12.8 g/dL"],
        "comorbidities": [],
        "family_history": ["No hematologic malignancy in first-degree relatives"],
        "treatment_goals": "Curative combined-modality therapy",
        "eligibility_factors": ["Treatment-naive"],
    }


def pie_answer_failing() -> dict:
    return {
        "primary_diagnosis": "Need more info",
        "base_diagnosis": "Need more info",
        "diagnosis_synonyms": "Need more info",
        "patient_demographics": "Need more info",
        "current_interventions": "Need more info",
        "treatment_history": "Need more info",
        "search_terms": "Need more info",
        "biomarkers": "Need more info",
        "performance_status": "Need more info",
        "laboratory_values": "Need more info",
        "comorbidities": "Need more info",
        "family_history": "Need more info",
        "treatment_goals": "Need more info",
        "eligibility_factors": "Need more info",
    }


def ptee_answer_cbef() -> dict:
    return {
        "eligibility_summary": {
            "eligibility_status": "Could Be Eligible in Future",
            "confidence_level": "MEDIUM",
            "summary": ("Diagnosis and demographics fit, but the protocol requires "
                        "more completed chemotherapy and imaging confirmation before "
                        "enrollment."),
        },
        "primary_criteria_assessment": [
            {"name": "Age", "status": "Eligible Now",
             "reasoning": "Patient is 62; protocol enrolls adults 18 years and older."},
            {"name": "Sex", "status": "Eligible Now",
             "reasoning": "Protocol enrolls all sexes."},
            {"name": "Geography", "status": "Eligible Now",
             "reasoning": "Recruiting sites are listed in the United States."},
            {"name": "Primary Diagnosis Match", "status": "Eligible Now",
             "reasoning": ("Borderline resectable pancreatic adenocarcinoma matches "
                           "the study population.")},
        ],
        "clinical_criteria_assessment": [
            {"name": "Prior Therapy", "status": "Could Be Eligible in Future",
             "reasoning": "Requires ≥2 months chemotherapy - patient has only completed 2 weeks"},
            {"name": "Performance Status", "status": "Need More Information",
             "reasoning": "No ECOG or Karnofsky score documented in the record."},
        ],
        "exclusion_criteria_assessment": [
            {"criterion": "Gross tumor invasion of stomach/duodenum",
             "status": "Need More Information",
             "reasoning": "Imaging details not provided in patient data"},
            {"criterion": "Distant metastases", "status": "Eligible Now",
             "reasoning": "Staging is M0 with no metastatic disease documented."},
        ],
        "actionable_recommendations": [
            "Complete at least two months of FOLFIRINOX and reassess",
            "Obtain cross-sectional imaging to document absence of gastroduodenal invasion",
        ],
        "missing_data_points": [
            "Geographic location/distance to trial site",
            "Recent cross-sectional imaging findings",
            "ECOG performance status",
        ],
        "qa_checklist": [
            {"check": "criteria coverage", "result": "pass",
             "note": "All listed protocol criteria were reviewed."},
        ],
    }


def ptee_answer_eligible() -> dict:
    return {
        "eligibility_summary": {
            "eligibility_status": "Eligible Now",
            "confidence_level": "HIGH",
            "summary": "All assessed criteria are currently satisfied.",
        },
        "primary_criteria_assessment": [
            {"name": "Age", "status": "Eligible Now",
             "reasoning": "Patient age is within protocol bounds."},
            {"name": "Primary Diagnosis Match", "status": "Eligible Now",
             "reasoning": "Diagnosis matches the study condition."},
        ],
        "clinical_criteria_assessment": [
            {"name": "Organ Function", "status": "Eligible Now",
             "reasoning": "Laboratory values are within protocol limits."},
        ],
        "exclusion_criteria_assessment": [
            {"criterion": "Active second malignancy", "status": "Eligible Now",
             "reasoning": "No second malignancy documented."},
        ],
        "actionable_recommendations": [],
        "missing_data_points": [],
        "qa_checklist": [],
    }


def ptee_answer_not_eligible() -> dict:
    return {
        "eligibility_summary": {
            "eligibility_status": "Not Eligible",
            "confidence_level": "HIGH",
            "summary": "The protocol enrolls relapsed or refractory disease only.",
        },
        "primary_criteria_assessment": [
            {"name": "Primary Diagnosis Match", "status": "Not Eligible",
             "reasoning": ("Protocol requires relapsed or refractory Hodgkin lymphoma; "
                           "patient is newly diagnosed and treatment-naive.")},
        ],
        "clinical_criteria_assessment": [],
        "exclusion_criteria_assessment": [],
        "actionable_recommendations": [],
        "missing_data_points": [],
        "qa_checklist": [],
    }


def ptee_answer_nmi() -> dict:
    return {
        "eligibility_summary": {
            "eligibility_status": "Need More Information",
            "confidence_level": "LOW",
            "summary": "Histology confirmation is required before eligibility can be judged.",
        },
        "primary_criteria_assessment": [
            {"name": "Primary Diagnosis Match", "status": "Need More Information",
             "reasoning": "Histologic subtype confirmation is not available in the record."},
        ],
        "clinical_criteria_assessment": [],
        "exclusion_criteria_assessment": [],
        "actionable_recommendations": [],
        "missing_data_points": ["Pathology report with histologic subtype"],
        "qa_checklist": [],
    }


def assessment_from_answer(patient_id: str, nct_id: str, answer: dict,
                           reasoning_trace: str = "",
                           timestamp: str = "2025-01-01T00:00:00Z",
                           check: bool = True) -> EligibilityAssessment:
    """Assemble an assessment object from a raw answer payload, no client."""
    parsed, violations = validate_assessment(answer)
    assert parsed is not None and not violations, violations
    metadata = AssessmentMetadata(
        assessment_date=timestamp,
        trial_id=nct_id,
        patient_id=patient_id,
        assessor_information=AssessorInformation("deepseek-r1", "1.0.0", "1.0.0", ""),
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
        reasoning_trace=reasoning_trace,
    )
    if check:
        consistency_check(assessment)
    return assessment


def wrap_response(reasoning: str, payload: dict) -> str:
    """Raw model output: think block, prose, fenced JSON."""
    body = json.dumps(payload, indent=2, ensure_ascii=False)
    return (f"<think>{reasoning}</think>\n"
            "Here is the structured result:\n"
            f"```json\n{body}\n```\n")


def study(nct_id: str, title: str, *, status: str = "RECRUITING",
          sex: str = "ALL", min_age: str | None = "18 Years",
          max_age: str | None = None, country: str = "United States",
          summary: str = "Synthetic protocol summary.",
          inclusion: str = "* Histologically confirmed disease",
          exclusion: str = "* Uncontrolled intercurrent illness") -> dict:
    eligibility = {
        "eligibilityCriteria": (f"Inclusion Criteria:\n\n{inclusion}\n\n"
                                f"Exclusion Criteria:\n\n{exclusion}"),
        "sex": sex,
    }
    if min_age:
        eligibility["minimumAge"] = min_age
    if max_age:
        eligibility["maximumAge"] = max_age
    return {
        "protocolSection": {
            "identificationModule": {"nctId": nct_id, "briefTitle": title},
            "statusModule": {"overallStatus": status},
            "descriptionModule": {"briefSummary": summary},
            "eligibilityModule": eligibility,
            "contactsLocationsModule": {"locations": [{"country": country}]},
        }
    }


def artia_study() -> dict:
    return study(
        ARTIA_NCT,
        "ARTIA-Pancreas: Cell Therapy for Borderline Resectable Pancreatic Cancer",
        summary=("Single-arm study of adoptive cell therapy added to chemotherapy "
                 "for borderline resectable pancreatic adenocarcinoma."),
        inclusion=("* Histologically confirmed pancreatic adenocarcinoma\n"
                   "* At least 2 months of systemic chemotherapy completed"),
        exclusion=("* Gross tumor invasion of stomach or duodenum\n"
                   "* Distant metastases"),
    )


def write_transcript(transcript_dir: Path, prompt_text: str, response: str) -> Path:
    path = Path(transcript_dir) / f"{sha256_hex(prompt_text)}.txt"
    write_text_atomic(path, response)
    return path


def write_page(registry_dir: Path, params: dict, studies: list[dict],
               next_token: str | None = None) -> Path:
    payload: dict = {"studies": studies}
    if next_token is not None:
        payload["nextPageToken"] = next_token
    path = Path(registry_dir) / f"{request_digest(params)}.json"
    write_text_atomic(path, pretty_json(payload))
    return path


def report_from_answer(patient_id: str, answer: dict) -> PatientReport:
    outcome = validate_report(answer)
    assert not outcome.violations, outcome.violations
    return PatientReport(
        patient_id=patient_id,
        fields=outcome.fields,
        extraction_metadata=ExtractionMetadata("PIE", "1.0.0", "deepseek-r1", "", ""),
        extras=outcome.extras,
    )


def write_docs(input_dir: Path, patient_id: str, docs: dict[str, str]):
    patient_dir = Path(input_dir) / patient_id
    patient_dir.mkdir(parents=True, exist_ok=True)
    for doc_id, text in docs.items():
        (patient_dir / f"{doc_id}.txt").write_text(text, encoding="utf-8")


def _panc_pages(registry_dir: Path, plan: QueryPlan):
    minimum, size = plan.minimum, plan.page_size
    t0, t1, t2, t3 = plan.tiers
    write_page(registry_dir, tier_request_params(t0, minimum, size, None),
               [artia_study()], next_token="page2")
    write_page(registry_dir, tier_request_params(t0, minimum, size, "page2"),
               [study(ELIGIBLE_NCT,
                      "Neoadjuvant FOLFIRINOX Intensification in Resectable "
                      "Pancreatic Cancer")])
    write_page(registry_dir, tier_request_params(t1, minimum, size, None), [
        study(ELIGIBLE_NCT, "Neoadjuvant FOLFIRINOX Intensification in Resectable "
                            "Pancreatic Cancer"),
        study(FEMALE_ONLY_NCT, "Hormone-Mediated Outcomes in Pancreatic Cancer",
              sex="FEMALE"),
        study(CLOSED_NCT, "Completed Maintenance Study in Pancreatic Cancer",
              status="ACTIVE_NOT_RECRUITING"),
    ])
    write_page(registry_dir, tier_request_params(t2, minimum, size, None),
               [artia_study()])
    write_page(registry_dir, tier_request_params(t3, minimum, size, None), [])


def _hodg_pages(registry_dir: Path, plan: QueryPlan):
    minimum, size = plan.minimum, plan.page_size
    t0, t1, t2 = plan.tiers
    write_page(registry_dir, tier_request_params(t0, minimum, size, None),
               [study(HODG_NE_NCT,
                      "Novel Agents for Relapsed or Refractory Hodgkin Lymphoma")])
    write_page(registry_dir, tier_request_params(t1, minimum, size, None), [
        study(HODG_NE_NCT, "Novel Agents for Relapsed or Refractory Hodgkin Lymphoma"),
        study(HODG_NMI_NCT, "Subtype-Directed Therapy in Classical Hodgkin Lymphoma"),
    ])
    write_page(registry_dir, tier_request_params(t2, minimum, size, None), [])


PIE_ANSWERS = {PANC: pie_answer_panc, HODG: pie_answer_hodg, FAILING: pie_answer_failing}
PTEE_ANSWERS = {
    (PANC, ARTIA_NCT): ptee_answer_cbef,
    (PANC, ELIGIBLE_NCT): ptee_answer_eligible,
    (HODG, HODG_NE_NCT): ptee_answer_not_eligible,
    (HODG, HODG_NMI_NCT): ptee_answer_nmi,
}
PAGE_WRITERS = {PANC: _panc_pages, HODG: _hodg_pages}
DOCS = {PANC: PANC_DOCS, HODG: HODG_DOCS, FAILING: FAILING_DOCS}

PIE_REASONING = ("Scanning the documents for diagnosis statements near the top, "
                 "then demographics, current treatment, and laboratory values.")
PTEE_REASONING = ("Checking minimum criteria first: age, sex, geography, and whether "
                  "the diagnosis matches the study condition. Then inclusion "
                  "criteria, then exclusions, before settling on an overall label.")


@dataclass
class Workspace:
    root: Path
    config_path: Path
    input_dir: Path
    output_dir: Path
    transcript_dir: Path
    registry_dir: Path
    reports: dict[str, PatientReport] = field(default_factory=dict)
    trials: dict[str, list[CandidateTrial]] = field(default_factory=dict)


def build_workspace(root: Path, include_failing: bool = False,
                    parallelism: int = 1) -> Workspace:
    """Lay out a complete replay workspace under root."""
    root = Path(root)
    input_dir = root / "patients"
    transcript_dir = root / "fixtures" / "transcripts"
    registry_dir = root / "fixtures" / "ctgov"
    output_dir = root / "out"
    for directory in (input_dir, transcript_dir, registry_dir):
        directory.mkdir(parents=True, exist_ok=True)

    registry = load_shipped_templates()
    pie = registry.latest("PIE")
    ptee = registry.latest("PTEE")
    categories = load_category_specs()
    minimum = MinimumCriteria()

    patient_ids = [PANC, HODG] + ([FAILING] if include_failing else [])
    workspace = Workspace(root, root / "config.json", input_dir, output_dir,
                          transcript_dir, registry_dir)

    for patient_id in patient_ids:
        write_docs(input_dir, patient_id, DOCS[patient_id])
        bundle = load_patient_dir(input_dir / patient_id)
        answer = PIE_ANSWERS[patient_id]()
        prompt = render_extraction_prompt(bundle, pie, categories)
        write_transcript(transcript_dir, prompt.text,
                         wrap_response(PIE_REASONING, answer))
        report = report_from_answer(patient_id, answer)
        workspace.reports[patient_id] = report

        if patient_id == FAILING:
            continue
        plan = build_query_plan(report, minimum)
        PAGE_WRITERS[patient_id](registry_dir, plan)
        trials, _ = execute_plan(plan, ReplayRegistryClient(registry_dir))
        workspace.trials[patient_id] = trials
        for trial in trials:
            pair_prompt = render_pair_prompt(report, trial, ptee)
            write_transcript(
                transcript_dir, pair_prompt.text,
                wrap_response(PTEE_REASONING, PTEE_ANSWERS[(patient_id, trial.nct_id)]()),
            )

    config = {
        "input_dir": "patients",
        "output_dir": "out",
        "registry_mode": "replay",
        "inference_mode": "replay",
        "inference_transcript_dir": "fixtures/transcripts",
        "registry_fixture_dir": "fixtures/ctgov",
        "parallelism": parallelism,
    }
    workspace.config_path.write_text(json.dumps(config, indent=2) + "\n",
                                     encoding="utf-8")
    return workspace
