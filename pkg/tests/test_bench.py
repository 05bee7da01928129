import json

import pytest

from dynaseal.bench import (
    Workload,
    check_relations,
    format_table,
    make_prompt,
    run_comparison,
    run_dynaseal_mode,
    run_embedded_mode,
    run_relay_mode,
    run_workload,
    write_report,
)


@pytest.fixture(scope="module")
def comparison():
    return run_comparison(n_requests=6, prompt_bytes=128,
                          expected_completion_tokens=600, parallelism=2)


def test_all_relations_hold(comparison):
    reports, checks = comparison
    failed = [(n, d) for n, ok, d in checks if not ok]
    assert not failed, failed


def test_embedded_mode_runs_without_backend(comparison):
    reports, _ = comparison
    embedded = reports["embedded"]
    assert embedded.backend_total == 0
    assert embedded.key_predeployment == "required"
    assert not embedded.extras["failures"]


def test_relay_doubles_backend_traffic(comparison):
    reports, _ = comparison
    relay = reports["relay"]
    ratio = relay.backend_total / relay.provider_total
    assert 1.9 <= ratio <= 2.1
    assert relay.key_predeployment == "not_required"


def test_dynaseal_backend_is_minimal(comparison):
    reports, _ = comparison
    dynaseal, relay = reports["dynaseal"], reports["relay"]
    assert dynaseal.backend_total <= 0.25 * relay.backend_total
    assert dynaseal.backend_total > 0  # issuance + callbacks, not zero
    assert dynaseal.key_predeployment == "not_required"
    assert dynaseal.extras["ledger_counts"]["COMPLETED"] == dynaseal.n_requests


def test_provider_traffic_uniform(comparison):
    reports, _ = comparison
    totals = [reports[m].provider_total for m in ("embedded", "relay", "dynaseal")]
    assert (max(totals) - min(totals)) / min(totals) <= 0.05


def test_byte_conservation_is_exact(comparison):
    reports, _ = comparison
    for report in reports.values():
        for name, pair in report.extras["conservation"].items():
            assert pair["exact"], (report.method, name, pair)


def test_every_response_within_budget(comparison):
    reports, _ = comparison
    for report in reports.values():
        assert report.extras["budget_violations"] == 0
        for usage in report.extras["usages"]:
            assert usage["completion_tokens"] == 600  # cap-determined workload


def test_relay_latency_strictly_above_embedded_with_injected_delay():
    workload = dict(n_requests=8, parallelism=1, prompt_bytes=64,
                    expected_completion_tokens=40, stream=True)
    embedded = run_embedded_mode(Workload(method="embedded", **workload), hop_delay=0.010)
    relay = run_relay_mode(Workload(method="relay", **workload), hop_delay=0.010)
    extra = relay.extras["latency_median_s"] - embedded.extras["latency_median_s"]
    assert relay.extras["latency_median_s"] > embedded.extras["latency_median_s"]
    assert 0.010 <= extra <= 0.020, extra


def test_dynaseal_backend_traffic_scales_with_requests_not_payload():
    base = dict(parallelism=2, expected_completion_tokens=300, stream=True)
    small = run_dynaseal_mode(Workload(method="dynaseal", n_requests=4, prompt_bytes=128, **base))
    double = run_dynaseal_mode(Workload(method="dynaseal", n_requests=8, prompt_bytes=128, **base))
    ratio = double.backend_total / small.backend_total
    assert 1.9 <= ratio <= 2.1, ratio

    fat_prompts = run_dynaseal_mode(Workload(method="dynaseal", n_requests=4,
                                             prompt_bytes=2048, **base))
    drift = abs(fat_prompts.backend_total - small.backend_total) / small.backend_total
    assert drift <= 0.005, drift  # prompts never transit the backend


def test_prompt_generator_is_exact_and_deterministic():
    p1 = make_prompt(3, 128)
    p2 = make_prompt(3, 128)
    assert p1 == p2
    assert len(p1.encode()) == 128
    assert make_prompt(4, 128) != p1
    assert len(make_prompt(0, 17).encode()) == 17


def test_workload_loader_roundtrip():
    w = Workload.from_dict({"method": "relay", "n_requests": 3, "parallelism": 1,
                            "prompt_bytes": 64, "expected_completion_tokens": 99, "stream": False})
    assert w == Workload(method="relay", n_requests=3, parallelism=1,
                         prompt_bytes=64, expected_completion_tokens=99, stream=False)
    with pytest.raises(ValueError):
        run_workload(Workload(method="bogus"))


def test_report_artifacts(tmp_path, comparison):
    reports, checks = comparison
    path = write_report(reports, checks, str(tmp_path))
    payload = json.loads(path.read_text())
    assert set(payload["reports"]) == {"embedded", "relay", "dynaseal"}
    assert all(c["ok"] for c in payload["checks"])
    table = format_table(reports)
    assert "Pre-embedded API Key" in table
    assert "Server Relay" in table
    assert "Dynaseal" in table
    assert "Not Required" in table


def test_non_streamed_workload_also_conserves_bytes():
    report = run_embedded_mode(Workload(method="embedded", n_requests=3, parallelism=1,
                                        prompt_bytes=64, expected_completion_tokens=50,
                                        stream=False))
    assert not report.extras["failures"]
    for pair in report.extras["conservation"].values():
        assert pair["exact"]
