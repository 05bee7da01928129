import json

import pytest

from dynaseal.scenarios import (
    COLUMNS,
    EXPECTED_ROWS,
    IncompleteEvidence,
    build_feature_matrix,
    run_all,
    run_method_probes,
    scenario_expiry_boundary,
    scenario_key_extraction,
    scenario_single_use,
    write_artifacts,
)


@pytest.fixture(scope="module")
def scenario_run():
    return run_all(mutations=60)


def test_matrix_matches_published_rows(scenario_run):
    assert scenario_run.matrix.rows == EXPECTED_ROWS
    assert scenario_run.matrix.matches_expected()


def test_every_cell_is_backed_by_evidence(scenario_run):
    for method, cols in scenario_run.matrix.evidence.items():
        for column in COLUMNS:
            probe = cols[column]
            assert probe.detail, (method, column)
            assert probe.value == scenario_run.matrix.rows[method][column]


def test_dynaseal_tamper_evidence_is_total(scenario_run):
    probe = scenario_run.matrix.evidence["dynaseal"]["anti_tampering"]
    assert probe.detail["rejected"] == probe.detail["mutations"]
    assert probe.detail["engine_calls_added"] == 0
    assert set(probe.detail["rejection_codes"]) <= {"bad_signature", "malformed"}


def test_security_scenarios_pass(scenario_run):
    names = {p.name: p for p in scenario_run.security}
    assert names["single_use"].value
    assert names["single_use"].detail["successes"] == 1
    assert names["single_use"].detail["replay_rejections"] == 63
    assert names["expiry_boundary"].value
    assert names["key_extraction"].value  # the baseline's weakness demonstrated


def test_incomplete_evidence_raises():
    evidence = {"dynaseal": run_method_probes("dynaseal", mutations=5)}
    del evidence["dynaseal"]["multi_model"]
    with pytest.raises(IncompleteEvidence):
        build_feature_matrix(evidence)


def test_artifact_file(tmp_path, scenario_run):
    path = write_artifacts(scenario_run, str(tmp_path))
    payload = json.loads(path.read_text())
    assert payload["feature_matrix"]["rows"] == {
        m: {c: v for c, v in cols.items()} for m, cols in EXPECTED_ROWS.items()
    }
    assert {s["name"] for s in payload["security_scenarios"]} == {
        "single_use", "expiry_boundary", "key_extraction"}


def test_table_formatting(scenario_run):
    table = scenario_run.matrix.format_table()
    lines = table.splitlines()
    assert lines[0].split()[0] == "method"
    dynaseal_row = next(l for l in lines if l.startswith("dynaseal"))
    assert dynaseal_row.split()[1:] == ["Yes", "Yes", "Yes", "Yes"]
    embedded_row = next(l for l in lines if l.startswith("openai-like"))
    assert embedded_row.split()[-4:] == ["No", "No", "No", "No"]


def test_expiry_boundary_with_one_second_ttl():
    probe = scenario_expiry_boundary(ttl=1)
    assert probe.value
    assert probe.detail["ttl"] == 1


def test_single_use_and_extraction_probes_standalone():
    assert scenario_single_use(concurrency=16).value
    assert scenario_key_extraction().value
