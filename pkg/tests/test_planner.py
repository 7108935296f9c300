import numpy as np
import pytest

from radner.core.economy import CRRAUtility, load_economy
from radner.core.planner import BudgetQuadrature, assemble_allocation, budget_residuals, expected_utilities, \
    inverse_marginal, negishi_solve, sharing_rule
from radner.exceptions import ConvergenceError, DegenerateEconomyError, ExprDomainError

# ============= Sharing rule =============

def test_log_sharing_rule_closed_form():
    rng = np.random.default_rng(0)
    for _ in range(100):
        rho = rng.uniform(0.0, 0.5, size=3)
        lam = rng.uniform(0.1, 10.0, size=3)
        t, agg = rng.uniform(0.0, 2.0), rng.uniform(0.01, 50.0)
        agents = [CRRAUtility(gamma=1.0, rho=r) for r in rho]
        x, mu = sharing_rule(agents, lam, t, agg)
        weights = lam * np.exp(-rho * t)
        np.testing.assert_allclose(x, agg * weights / weights.sum(), rtol=1e-10)
        assert mu == pytest.approx(weights.sum() / agg, rel=1e-10)
        assert abs(x.sum() - agg) <= 1e-12 * agg


@pytest.mark.parametrize("gamma, y", [(1.0, -2.0), (2.0, 0.0), (0.5, [1.0, np.nan])])
def test_inverse_marginal_needs_positive_argument(gamma, y):
    with pytest.raises(ExprDomainError):
        inverse_marginal(CRRAUtility(gamma=gamma), 0.0, y)


def test_inverse_marginal_inverts_marginal():
    u = CRRAUtility(gamma=3.0, rho=0.2)
    c = np.array([0.5, 1.0, 4.0])
    np.testing.assert_allclose(inverse_marginal(u, 0.7, u.marginal(0.7, c)), c, rtol=1e-12)


def test_crra_sharing_rule_closed_form():
    agents = [CRRAUtility(gamma=2.0), CRRAUtility(gamma=2.0)]
    lam = np.array([1.0, 4.0])
    agg = np.array([0.5, 1.0, 3.0])
    x, mu = sharing_rule(agents, lam, 0.0, agg)
    np.testing.assert_allclose(x, np.outer([1 / 3, 2 / 3], agg), rtol=1e-10)
    for i, u in enumerate(agents):
        np.testing.assert_allclose(lam[i] * u.marginal(0.0, x[i]), mu, rtol=1e-10)


def test_mixed_risk_aversion_satisfies_first_order_conditions():
    agents = [CRRAUtility(gamma=0.5, rho=0.05), CRRAUtility(gamma=1.0), CRRAUtility(gamma=3.0, rho=0.2)]
    lam = np.array([1.0, 0.3, 2.0])
    t = np.linspace(0.0, 1.0, 7)[:, None]
    agg = np.linspace(0.1, 20.0, 11)[None, :]
    x, mu = sharing_rule(agents, lam, t, agg)
    assert x.shape == (3, 7, 11)
    np.testing.assert_allclose(x.sum(axis=0), np.broadcast_to(agg, mu.shape), rtol=1e-12)
    for i, u in enumerate(agents):
        np.testing.assert_allclose(lam[i] * u.marginal(t, x[i]), mu, rtol=1e-10)


def test_scale_invariance():
    agents = [CRRAUtility(gamma=2.0), CRRAUtility(gamma=0.7, rho=0.1)]
    lam = np.array([1.0, 2.5])
    x1, mu1 = sharing_rule(agents, lam, 0.5, 3.0)
    x2, mu2 = sharing_rule(agents, 2.0 * lam, 0.5, 3.0)
    np.testing.assert_allclose(x2, x1, rtol=1e-12)
    assert mu2 == pytest.approx(2.0 * mu1, rel=1e-12)


def test_consumption_increases_with_own_weight():
    agents = [CRRAUtility(gamma=2.0), CRRAUtility(gamma=2.0)]
    shares = [sharing_rule(agents, [1.0, w], 0.0, 1.0)[0][1] for w in (0.5, 1.0, 2.0, 4.0)]
    assert np.all(np.diff(shares) > 0)


def test_single_agent_consumes_the_aggregate():
    u = CRRAUtility(gamma=2.0, rho=0.1)
    x, mu = sharing_rule([u], [3.0], 0.7, np.array([1.0, 2.0]))
    np.testing.assert_array_equal(x[0], [1.0, 2.0])
    np.testing.assert_allclose(mu, 3.0 * u.marginal(0.7, np.array([1.0, 2.0])))


def test_sharing_rule_rejects_bad_inputs():
    agents = [CRRAUtility(gamma=1.0), CRRAUtility(gamma=1.0)]
    with pytest.raises(ValueError):
        sharing_rule(agents, [1.0, 0.0], 0.0, 1.0)
    with pytest.raises(ValueError):
        sharing_rule(agents, [1.0, 1.0], 0.0, -1.0)
    with pytest.raises(ConvergenceError):
        sharing_rule(agents, [1.0, 3.0], 0.0, 1.0, max_iter=1)

# ============= Negishi =============

def test_single_agent_is_a_no_trade_equilibrium(economy, quadrature, small_grid):
    econ = economy("log1")
    eq = negishi_solve(econ, quad=quadrature, grid=small_grid)
    assert eq.converged and eq.iterations == 0
    np.testing.assert_array_equal(eq.lam, [1.0])
    assert abs(eq.relative_residuals[0]) <= 1e-12
    alloc = eq.allocation
    u = econ.agents[0].utility
    tt = small_grid.times[:, None]
    np.testing.assert_allclose(alloc.psi, u.marginal(tt, alloc.aggregate), rtol=1e-10)


def test_proportional_endowments(economy, quadrature, small_grid):
    econ = economy("proportional")
    eq = negishi_solve(econ, quad=quadrature, grid=small_grid)
    assert eq.converged
    np.testing.assert_allclose(eq.lam, [1.0, 7.0 / 3.0], rtol=1e-6)
    assert np.max(np.abs(eq.relative_residuals)) <= 1e-6
    alloc = eq.allocation
    np.testing.assert_allclose(alloc.consumption[0], 0.3 * alloc.aggregate, rtol=1e-6)
    np.testing.assert_allclose(alloc.consumption[1], 0.7 * alloc.aggregate, rtol=1e-6)


def test_two_agent_equilibrium_clears_and_prices(economy, quadrature, small_grid):
    econ = economy("log1_two_agents")
    q = BudgetQuadrature(econ, quadrature)
    eq = negishi_solve(econ, quad=q, grid=small_grid)
    assert eq.converged
    assert eq.lam[0] == 1.0
    assert np.max(np.abs(eq.relative_residuals)) <= 1e-6
    alloc = eq.allocation
    np.testing.assert_allclose(alloc.consumption.sum(axis=0), alloc.aggregate, rtol=1e-10)
    np.testing.assert_allclose(alloc.consumption_terminal.sum(axis=0), alloc.aggregate_terminal, rtol=1e-10)
    assert np.all(alloc.psi > 0)
    for i, agent in enumerate(econ.agents):
        foc = eq.lam[i] * agent.utility.marginal(small_grid.times[:, None], alloc.consumption[i])
        np.testing.assert_allclose(foc, alloc.psi, rtol=1e-10)
    planned, endowed = expected_utilities(econ, eq.lam, q)
    assert np.all(planned >= endowed - 1e-12)


def test_budget_residuals_satisfy_walras_law(economy, quadrature):
    econ = economy("log1_two_agents")
    q = BudgetQuadrature(econ, quadrature)
    for lam in ([1.0, 1.0], [1.0, 0.2], [1.0, 5.0]):
        r = budget_residuals(econ, lam, q)
        assert abs(r.sum()) <= 1e-10 * np.abs(r).max()


def test_zero_endowment_agent_is_degenerate(catalog_document, quadrature):
    doc = catalog_document("log1_two_agents")
    doc["agents"][1].update(entitlement="0", shares=[0.0, 0.0])
    doc["agents"][0].update(shares=[1.0, 1.0])
    with pytest.raises(DegenerateEconomyError) as info:
        negishi_solve(load_economy(doc), quad=quadrature)
    assert info.value.witness["agent"] == 1


def test_allocation_grid_matches_equilibrium(economy, small_grid):
    econ = economy("proportional")
    alloc = assemble_allocation(econ, [1.0, 7.0 / 3.0], small_grid)
    assert alloc.consumption.shape == (2, small_grid.times.size, 161)
    np.testing.assert_allclose(alloc.endowment.sum(axis=0), alloc.aggregate, rtol=1e-12)
    np.testing.assert_allclose(alloc.entitlement[1], 0.07)
