import numpy as np
import pytest

from radner.core.economy import Box, CRRAUtility, aggregate_endowment, individual_endowment, load_economy, \
    min_abs_jacobian_det, validate_assumptions
from radner.exceptions import AssumptionViolation, EconomyConfigError


def test_load_catalog_economy(economy):
    econ = economy("log1")
    assert (econ.K, econ.I) == (1, 1)
    assert econ.name == "log1"
    np.testing.assert_array_equal(econ.supply, [1.0, 1.0])
    assert econ.assets[0].is_numeraire_bond
    assert not econ.assets[1].is_numeraire_bond
    # terminal payoff defaults to the flow dividend at T
    assert econ.assets[1].terminal(1.0, np.array([[0.0]]))[0] == pytest.approx(1.0)


def test_bond_with_flow_dividend_is_rejected(catalog_document):
    doc = catalog_document("log1")
    doc["assets"][0]["dividend"] = "0.01"
    with pytest.raises(EconomyConfigError, match="zero flow dividend"):
        load_economy(doc)


def test_malformed_expression_fails_the_whole_load(catalog_document):
    doc = catalog_document("log1")
    doc["agents"][0]["entitlement"] = "0.1 + "
    with pytest.raises(EconomyConfigError) as info:
        load_economy(doc)
    assert info.value.witness["errors"][0]["loc"] == "agents[0].entitlement"


def test_state_coefficients_must_be_autonomous(catalog_document):
    doc = catalog_document("log1")
    doc["diffusion"]["b"] = ["t"]
    with pytest.raises(EconomyConfigError, match="must not depend on t"):
        load_economy(doc)


@pytest.mark.parametrize("edit", [
    lambda d: d["diffusion"].update(sigma=[["1", "0"]]),
    lambda d: d["assets"].pop(),
    lambda d: d["agents"][0].update(shares=[1.0]),
    lambda d: d["agents"][0].update(gamma=0.0),
    lambda d: d["diffusion"].update(x0=[9.0]),
    lambda d: d["rank_region"].update(hi=[9.0]),
])
def test_structural_errors(catalog_document, edit):
    doc = catalog_document("log1")
    edit(doc)
    with pytest.raises(EconomyConfigError):
        load_economy(doc)


def test_aggregate_is_the_sum_of_individual_endowments(economy):
    econ = economy("log1_two_agents")
    flow, lump = aggregate_endowment(econ)
    X = np.linspace(-3, 3, 41)[:, None]
    t = np.linspace(0, 1, 41)
    parts = [individual_endowment(econ, i) for i in range(econ.I)]
    np.testing.assert_allclose(flow(t, X), sum(f(t, X) for f, _ in parts), rtol=1e-14)
    np.testing.assert_allclose(lump(1.0, X), sum(l(1.0, X) for _, l in parts), rtol=1e-14)
    # 0.1 of entitlements plus exp(x) from asset 1, and the bond pays 1 at T
    np.testing.assert_allclose(lump(1.0, X), 0.1 + 1.0 + np.exp(X[:, 0]), rtol=1e-14)


def test_crra_utility():
    log = CRRAUtility(gamma=1.0, rho=0.1)
    assert log.is_log
    assert log.marginal(0.0, 2.0) == pytest.approx(0.5)
    assert log.inverse_marginal(1.0, log.marginal(1.0, 3.0)) == pytest.approx(3.0)
    crra = CRRAUtility(gamma=2.0)
    assert crra.value(0.0, 2.0) == pytest.approx(-0.5)
    assert crra.inverse_marginal(0.0, 0.25) == pytest.approx(2.0)


def test_box_sample_contains_corners():
    box = Box.from_bounds([0.0, -1.0], [1.0, 1.0])
    points = box.sample(32, seed=1)
    assert points.shape == (36, 2)
    assert np.all(box.contains(points))
    for corner in box.corners():
        assert np.any(np.all(points == corner, axis=1))

# ============= Validation =============

def test_benchmark_passes_validation(economy):
    report = validate_assumptions(economy("log1"), samples=256, seed=5)
    assert report.passed
    verdicts = report.verdicts()
    assert verdicts["analyticity"] == "UNVERIFIABLE"
    assert all(v == "PASS" for k, v in verdicts.items() if k != "analyticity")
    assert report.check("A1-ellipticity").witnesses["min_eigenvalue"] == pytest.approx(1.0)
    assert all(c.region_relative for c in report.checks if c.assumption.startswith(("A1", "A4", "A7")))


def test_validation_is_deterministic(economy):
    econ = economy("log1_two_agents")
    first = validate_assumptions(econ, samples=128, seed=9)
    second = validate_assumptions(econ, samples=128, seed=9)
    assert first.model_dump() == second.model_dump()


def test_redundant_asset_fails_terminal_rank(economy):
    report = validate_assumptions(economy("redundant"), samples=128, seed=5)
    check = report.check("A7-terminal-rank")
    assert check.verdict == "FAIL"
    assert check.witnesses["min_abs_det_Dh"] == 0.0
    assert not report.passed


def test_negative_entitlement_fails_with_location(catalog_document):
    doc = catalog_document("log1")
    doc["agents"][0]["entitlement"] = "x1"
    report = validate_assumptions(load_economy(doc), samples=128, seed=5)
    check = report.check("A4-entitlements")
    assert check.verdict == "FAIL"
    assert check.location is not None and check.location[1] < 0


def test_domain_error_becomes_a_failed_check(catalog_document):
    doc = catalog_document("log1")
    doc["diffusion"]["sigma"] = [["sqrt(x1)"]]
    report = validate_assumptions(load_economy(doc), samples=64, seed=5)
    check = report.check("A1-ellipticity")
    assert check.verdict == "FAIL"
    assert check.location is not None and check.location[0] < 0


def test_domain_errors_report_where_they_happen(catalog_document):
    doc = catalog_document("log1")
    doc["agents"][0]["entitlement"] = "log(x1)"
    report = validate_assumptions(load_economy(doc), samples=64, seed=5)
    for name in ("A4-entitlements", "A6ii-aggregate-bounds", "A6i-marginal-felicity"):
        check = report.check(name)
        assert check.verdict == "FAIL"
        t, x1 = check.location
        assert 0.0 <= t <= 1.0
        assert x1 <= 0.0


def test_dividend_domain_error_has_a_location(catalog_document):
    doc = catalog_document("log1")
    doc["assets"][1]["dividend"] = "sqrt(x1)"
    doc["assets"][1]["terminal"] = "1"
    check = validate_assumptions(load_economy(doc), samples=64, seed=5).check("A5-dividends")
    assert check.verdict == "FAIL"
    assert len(check.location) == 2
    assert check.location[1] < 0.0


def test_jacobian_domain_error_is_located_on_the_rank_region(catalog_document):
    doc = catalog_document("log1")
    doc["assets"][1]["terminal"] = "log(x1 + 1)"
    check = validate_assumptions(load_economy(doc), samples=64, seed=5).check("A7-terminal-rank")
    assert check.verdict == "FAIL"
    assert check.location == pytest.approx([-1.0])


def test_terminal_rank_needs_positive_bond_payoff(catalog_document):
    doc = catalog_document("log1")
    doc["assets"][0]["terminal"] = "x1"
    with pytest.raises(AssumptionViolation):
        min_abs_jacobian_det(load_economy(doc), samples=64, seed=1)
