import json

import pandas as pd
import pytest
from click.testing import CliRunner

from radner.cli_app import cli
from radner.utils.io import read_report


@pytest.fixture
def invoke(run_config, tmp_path):
    runner = CliRunner()

    def _invoke(command, economy="log1", out="out", *extra):
        config = run_config(economy)
        return runner.invoke(cli, [command, "--config", str(config), "--out", str(tmp_path / out), *extra])
    return _invoke


def test_catalog_lists_benchmarks():
    result = CliRunner().invoke(cli, ["catalog"])
    assert result.exit_code == 0
    for name in ("log1", "log1_two_agents", "proportional", "redundant"):
        assert name in result.output


def test_validate_writes_report(invoke, tmp_path):
    result = invoke("validate")
    assert result.exit_code == 0, result.output
    assert "validate · PASS" in result.output
    assert "verdicts" in result.output and "failed" in result.output
    report = read_report(tmp_path / "out" / "validation.json")
    assert report.header.stage == "validate"
    assert report.header.seed == 11
    assert report.header.assumptions["analyticity"] == "UNVERIFIABLE"
    assert len(report.header.config_hash) == 64


def test_full_benchmark_pipeline(invoke, tmp_path):
    out = tmp_path / "out"
    assert invoke("solve-ad").exit_code == 0
    ad = read_report(out / "ad_equilibrium.json")
    assert ad.body["negishi"]["weights"] == [1.0]
    assert ad.body["individually_rational"]
    psi = pd.read_csv(out / "psi.csv")
    assert list(psi.columns) == ["t", "x1", "psi"]
    assert len(psi) == 61 * 121

    result = invoke("price")
    assert result.exit_code == 0, result.output
    diag = read_report(out / "pricing_diag.json")
    assert len(diag.body["mc_cross_check"]) == 2
    assert len(diag.body["diagnostics"]["initial_prices"]) == 2
    assert (out / "prices.csv").exists()

    assert invoke("completeness").exit_code == 0
    completeness = read_report(out / "completeness.json")
    assert completeness.body["verdict"] == "COMPLETE-ON-GRID"
    assert (out / "det.csv").exists()

    result = invoke("radner", "log1", "out", "--paths-csv")
    assert result.exit_code == 0, result.output
    radner = read_report(out / "radner.json")
    assert radner.body["valid"]
    assert radner.body["portfolio_clearing_max"] <= 1e-6
    assert (out / "paths.csv").exists()


def test_downstream_stage_needs_upstream_cache(invoke, tmp_path):
    result = invoke("price")
    assert result.exit_code == 1
    error = json.loads((tmp_path / "out" / "error.json").read_text())
    assert error["body"]["error"] == "StageArtifactError"
    assert error["body"]["stage"] == "price"


def test_cache_from_another_configuration_is_rejected(invoke, tmp_path):
    assert invoke("solve-ad", "log1", "out", "--seed", "1").exit_code == 0
    assert invoke("price", "log1", "out", "--seed", "2").exit_code == 1
    error = json.loads((tmp_path / "out" / "error.json").read_text())
    assert "different configuration" in error["body"]["message"]


def test_redundant_market_is_reported_incomplete(invoke, tmp_path):
    assert invoke("solve-ad", "redundant").exit_code == 0
    invoke("price", "redundant")
    result = invoke("completeness", "redundant")
    assert result.exit_code == 1
    report = read_report(tmp_path / "out" / "completeness.json")
    assert report.body["verdict"] == "INCOMPLETE-ON-GRID"
    assert report.body["witnesses"]


def test_all_stops_at_the_first_failing_stage(invoke, tmp_path):
    result = invoke("all", "redundant")
    assert result.exit_code == 1
    out = tmp_path / "out"
    assert (out / "validation.json").exists()
    assert not (out / "ad_equilibrium.json").exists()


def test_reports_are_deterministic(invoke, tmp_path):
    assert invoke("solve-ad", "log1_two_agents", "a").exit_code == 0
    assert invoke("solve-ad", "log1_two_agents", "b").exit_code == 0
    first = read_report(tmp_path / "a" / "ad_equilibrium.json")
    second = read_report(tmp_path / "b" / "ad_equilibrium.json")
    assert first.body == second.body
    assert first.header.config_hash == second.header.config_hash


@pytest.mark.parametrize("economy, extra", [("no_such_economy", ()), ("log1", ("--grid-scale", "0"))])
def test_configuration_errors(invoke, tmp_path, economy, extra):
    result = invoke("validate", economy, "out", *extra)
    assert result.exit_code == 1
    error = json.loads((tmp_path / "out" / "error.json").read_text())
    assert error["body"]["error"] == "EconomyConfigError"


def test_all_is_reproducible(invoke, tmp_path):
    for out in ("a", "b"):
        result = invoke("all", "log1", out)
        assert result.exit_code == 0, result.output
    first, second = tmp_path / "a", tmp_path / "b"
    reports = sorted(p.name for p in first.glob("*.json"))
    assert {"validation.json", "ad_equilibrium.json", "pricing_diag.json", "completeness.json", "radner.json"} <= set(reports)
    for name in reports:
        body = json.dumps(read_report(first / name).body, sort_keys=True)
        assert body == json.dumps(read_report(second / name).body, sort_keys=True), name
    for path in sorted(first.glob("*.csv")):
        assert path.read_bytes() == (second / path.name).read_bytes(), path.name
