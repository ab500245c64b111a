from __future__ import annotations

import json

import pytest

from trialmatch.common import FixedClock
from trialmatch.errors import ExtractionSchemaViolation
from trialmatch.extraction import (
    MISSING_SENTINEL,
    Demographics,
    FieldValue,
    PatientReport,
    corrective_prompt,
    extract_patient_report,
    render_extraction_prompt,
    render_field,
    validate_report,
)
from trialmatch.inference import InferenceClient, InferenceConfig
from trialmatch.ingest import make_document, normalize_bundle
from trialmatch.templating import CATEGORY_KEYS, load_category_specs, load_shipped_templates

import fixtures
from test_inference import ScriptedBackend


def bundle_of(patient_id="P1", text="Diagnosis: something.\nProse follows here."):
    return normalize_bundle([make_document("01_note", patient_id, text)])


def scripted_client(responses):
    return InferenceClient(backend=ScriptedBackend(responses),
                           config=InferenceConfig(), sleeper=lambda _: None)


class TestValidateReport:
    def test_complete_answer_types_all_fields(self):
        outcome = validate_report(fixtures.pie_answer_panc())
        assert outcome.ok
        assert set(outcome.fields) == set(CATEGORY_KEYS)
        demographics = outcome.fields["patient_demographics"].value
        assert demographics == Demographics(age=62, sex="Male", zip_code="10001")
        assert outcome.fields["diagnosis_synonyms"].value == (
            "Pancreatic cancer", "Pancreatic ductal adenocarcinoma")
        assert not outcome.fields["performance_status"].is_present

    def test_sentinel_is_case_insensitive(self):
        answer = fixtures.pie_answer_panc()
        answer["family_history"] = "NEED MORE INFO"
        answer["performance_status"] = "need more info "
        outcome = validate_report(answer)
        assert outcome.ok
        assert not outcome.fields["family_history"].is_present
        assert not outcome.fields["performance_status"].is_present

    def test_missing_category_violation_string(self):
        answer = fixtures.pie_answer_panc()
        del answer["biomarkers"]
        outcome = validate_report(answer)
        assert "biomarkers: missing" in outcome.violations

    def test_age_must_be_integer(self):
        answer = fixtures.pie_answer_panc()
        answer["patient_demographics"]["age"] = "34 years old"
        outcome = validate_report(answer)
        assert "patient_demographics.age: not an integer" in outcome.violations

    def test_digit_string_age_accepted(self):
        answer = fixtures.pie_answer_panc()
        answer["patient_demographics"]["age"] = "62"
        outcome = validate_report(answer)
        assert outcome.ok
        assert outcome.fields["patient_demographics"].value.age == 62

    def test_boolean_age_rejected(self):
        answer = fixtures.pie_answer_panc()
        answer["patient_demographics"]["age"] = True
        assert "patient_demographics.age: not an integer" in validate_report(answer).violations

    def test_age_bounds(self):
        for bad in (-1, 121):
            answer = fixtures.pie_answer_panc()
            answer["patient_demographics"]["age"] = bad
            assert "patient_demographics.age: outside 0-120" in validate_report(answer).violations
        for ok in (0, 120):
            answer = fixtures.pie_answer_panc()
            answer["patient_demographics"]["age"] = ok
            assert validate_report(answer).ok

    def test_zip_must_be_five_digits(self):
        answer = fixtures.pie_answer_panc()
        answer["patient_demographics"]["zip_code"] = "1234"
        assert ("patient_demographics.zip_code: not a 5-digit ZIP"
                in validate_report(answer).violations)

    def test_sex_normalized_and_validated(self):
        answer = fixtures.pie_answer_panc()
        answer["patient_demographics"]["sex"] = "female"
        outcome = validate_report(answer)
        assert outcome.fields["patient_demographics"].value.sex == "Female"
        answer["patient_demographics"]["sex"] = "nonbinary code 7"
        assert any(v.startswith("patient_demographics.sex:")
                   for v in validate_report(answer).violations)

    def test_missing_demographic_subfields_default(self):
        answer = fixtures.pie_answer_panc()
        answer["patient_demographics"] = {}
        outcome = validate_report(answer)
        assert outcome.fields["patient_demographics"].value == Demographics(
            age=None, sex="Unknown", zip_code=None)

    def test_list_field_type_enforced(self):
        answer = fixtures.pie_answer_panc()
        answer["biomarkers"] = "KRAS G12D"
        assert "biomarkers: not a list" in validate_report(answer).violations
        answer["biomarkers"] = ["ok", 42]
        assert "biomarkers[1]: not text" in validate_report(answer).violations

    def test_text_field_type_enforced(self):
        answer = fixtures.pie_answer_panc()
        answer["primary_diagnosis"] = ["list", "not allowed"]
        assert "primary_diagnosis: not text" in validate_report(answer).violations
        answer["primary_diagnosis"] = "   "
        assert "primary_diagnosis: empty text" in validate_report(answer).violations

    def test_empty_list_is_present(self):
        answer = fixtures.pie_answer_panc()
        answer["comorbidities"] = []
        outcome = validate_report(answer)
        assert outcome.ok
        assert outcome.fields["comorbidities"].is_present
        assert outcome.fields["comorbidities"].value == ()

    def test_unknown_keys_flagged_not_blocking(self):
        answer = fixtures.pie_answer_panc()
        answer["smoking_status"] = "never"
        outcome = validate_report(answer)
        assert outcome.ok
        assert outcome.extras == {"smoking_status": "never"}
        assert "smoking_status: unknown key" in outcome.flags

    def test_non_object_rejected(self):
        assert validate_report("text").violations == ["document: not an object"]


class TestFieldRendering:
    def test_demographics_line(self):
        value = FieldValue.present(Demographics(age=62, sex="Male", zip_code="10001"))
        assert render_field(value) == "age 62; sex Male; ZIP 10001"

    def test_demographics_partial(self):
        value = FieldValue.present(Demographics(age=None, sex="Unknown", zip_code=None))
        assert render_field(value) == f"age {MISSING_SENTINEL}; sex Unknown"

    def test_list_joined(self):
        assert render_field(FieldValue.present(("a", "b"))) == "a; b"

    def test_empty_list_reads_none_recorded(self):
        assert render_field(FieldValue.present(())) == "None recorded"

    def test_sentinel(self):
        assert render_field(FieldValue.need_more_info()) == "Need more info"

    def test_field_value_state_rules(self):
        with pytest.raises(ValueError):
            FieldValue.present(None)
        from trialmatch.extraction import FieldState
        with pytest.raises(ValueError):
            FieldValue(FieldState.NEED_MORE_INFO, "data")


class TestReportDocument:
    def test_round_trip_preserves_fields(self):
        report = fixtures.report_from_answer("P1", fixtures.pie_answer_panc())
        doc = report.to_document()
        assert doc["fields"]["performance_status"] == MISSING_SENTINEL
        assert doc["fields"]["patient_demographics"]["age"] == 62
        reloaded = PatientReport.from_document(doc)
        assert reloaded.to_document() == doc

    def test_report_requires_all_categories(self):
        report = fixtures.report_from_answer("P1", fixtures.pie_answer_panc())
        partial = dict(report.fields)
        del partial["biomarkers"]
        with pytest.raises(ValueError):
            PatientReport("P1", partial, report.extraction_metadata)

    def test_field_lines_in_category_order(self):
        report = fixtures.report_from_answer("P1", fixtures.pie_answer_panc())
        lines = report.field_lines()
        assert lines[0] == {
            "name": "Primary Diagnosis",
            "value": "Borderline resectable pancreatic adenocarcinoma (T2N1M0 Stage IIB)",
        }
        assert len(lines) == 14


class TestCorrectivePrompt:
    def test_appends_violations_and_instruction(self):
        original = render_extraction_prompt(
            bundle_of(), load_shipped_templates().latest("PIE"), load_category_specs()
        )
        retry = corrective_prompt(original, ["biomarkers: missing"])
        assert retry.text.startswith(original.text)
        assert "- biomarkers: missing" in retry.text
        assert "ONLY the corrected JSON object" in retry.text
        assert retry.prompt_digest != original.prompt_digest


class TestExtractPatientReport:
    def _run(self, responses):
        registry = load_shipped_templates()
        return extract_patient_report(
            bundle_of(), registry.latest("PIE"), scripted_client(responses),
            load_category_specs(), FixedClock(),
        )

    def test_clean_answer_single_exchange(self):
        raw = fixtures.wrap_response("thinking", fixtures.pie_answer_panc())
        report, exchanges = self._run([raw])
        assert len(exchanges) == 1
        assert report.patient_id == "P1"
        assert report.extraction_metadata.template_id == "PIE"
        assert report.extraction_metadata.timestamp == "2025-01-01T00:00:00Z"
        assert report.extraction_metadata.prompt_digest == exchanges[-1].prompt_digest

    def test_schema_failure_reprompts_once(self):
        bad = fixtures.pie_answer_panc()
        del bad["biomarkers"]
        responses = [
            fixtures.wrap_response("r1", bad),
            fixtures.wrap_response("r2", fixtures.pie_answer_panc()),
        ]
        report, exchanges = self._run(responses)
        assert len(exchanges) == 2
        assert report.fields["biomarkers"].is_present

    def test_corrective_prompt_carries_violation_text(self):
        bad = fixtures.pie_answer_panc()
        del bad["biomarkers"]
        backend = ScriptedBackend([
            fixtures.wrap_response("r1", bad),
            fixtures.wrap_response("r2", fixtures.pie_answer_panc()),
        ])
        client = InferenceClient(backend=backend, config=InferenceConfig(),
                                 sleeper=lambda _: None)
        registry = load_shipped_templates()
        extract_patient_report(bundle_of(), registry.latest("PIE"), client,
                               load_category_specs(), FixedClock())
        assert "- biomarkers: missing" in backend.sent[1]

    def test_two_schema_failures_raise(self):
        bad = fixtures.pie_answer_panc()
        del bad["biomarkers"]
        responses = [fixtures.wrap_response("r", bad)] * 2
        with pytest.raises(ExtractionSchemaViolation) as excinfo:
            self._run(responses)
        assert "biomarkers: missing" in excinfo.value.violations

    def test_unparseable_payload_becomes_violation(self):
        responses = [
            "<think>mumbling</think>no json at all",
            fixtures.wrap_response("r2", fixtures.pie_answer_panc()),
        ]
        report, exchanges = self._run(responses)
        assert len(exchanges) == 2
        assert report.fields["primary_diagnosis"].is_present

    def test_prompt_digest_stable_across_renders(self):
        registry = load_shipped_templates()
        pie = registry.latest("PIE")
        categories = load_category_specs()
        one = render_extraction_prompt(bundle_of(), pie, categories)
        two = render_extraction_prompt(bundle_of(), pie, categories)
        assert one.prompt_digest == two.prompt_digest
