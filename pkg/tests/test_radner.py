import numpy as np
import pytest

from radner.core.economy import Box
from radner.core.markov import build_grid, simulate_paths
from radner.core.planner import negishi_solve
from radner.core.pricing import price_all_assets
from radner.core.radner import net_trade_value, portfolio_field, replicating_portfolio, simulate_radner
from radner.exceptions import SingularVolatilityError


@pytest.fixture
def solved(economy, quadrature, small_grid):
    def _solve(name):
        econ = economy(name)
        eq = negishi_solve(econ, quad=quadrature, grid=small_grid)
        return econ, eq, price_all_assets(econ, eq, small_grid)
    return _solve


def test_single_agent_holds_initial_shares(solved):
    econ, eq, p = solved("log1")
    paths = simulate_paths(econ.diffusion, econ.T, steps=16, n_paths=200, seed=21)
    outcome = simulate_radner(econ, eq, p, paths)
    np.testing.assert_allclose(outcome.theta[0], np.broadcast_to([1.0, 1.0], outcome.theta[0].shape), atol=1e-12)
    assert np.max(np.abs(outcome.replication_error)) <= 1e-8
    assert outcome.summary.valid
    assert outcome.summary.portfolio_clearing_max <= 1e-12
    assert outcome.summary.consumption_clearing_max <= 1e-10
    assert outcome.summary.agents[0].initial_value == pytest.approx(float(p.grid.value_at_x0(p.s[:, 0]).sum()))


def test_prices_replicate_themselves(solved, small_grid):
    _, _, p = solved("log1")
    node = (10, (80,))
    np.testing.assert_allclose(replicating_portfolio(p, p.s[1], *node), [0.0, 1.0], atol=1e-10)
    np.testing.assert_allclose(replicating_portfolio(p, p.s[0], *node), [1.0, 0.0], atol=1e-10)
    field = portfolio_field(p, 2.0 * p.s[0] + 3.0 * p.s[1])
    inner = small_grid.interior_mask
    np.testing.assert_allclose(field.theta[0][:, inner], 2.0, atol=1e-8)
    np.testing.assert_allclose(field.theta[1][:, inner], 3.0, atol=1e-8)
    assert not field.singular.any()


def test_net_trade_values_add_up_to_zero(solved):
    econ, eq, p = solved("log1_two_agents")
    v = [net_trade_value(econ, eq, p, i) for i in range(econ.I)]
    np.testing.assert_allclose(v[0] + v[1], 0.0, atol=1e-10)
    assert np.max(np.abs(v[0])) > 1e-6


def test_proportional_agents_do_not_need_to_trade(solved):
    econ, eq, p = solved("proportional")
    for i in range(econ.I):
        v = net_trade_value(econ, eq, p, i)
        assert abs(p.grid.value_at_x0(v[0])) <= 1e-8


def test_two_agent_portfolios_clear(solved):
    econ, eq, p = solved("log1_two_agents")
    paths = simulate_paths(econ.diffusion, econ.T, steps=32, n_paths=500, seed=22)
    outcome = simulate_radner(econ, eq, p, paths)
    assert outcome.theta.shape == (2, 500, 33, 2)
    assert outcome.summary.portfolio_clearing_max <= 1e-6
    assert outcome.summary.consumption_clearing_max <= 1e-10
    np.testing.assert_allclose(outcome.theta.sum(axis=0), np.broadcast_to(econ.supply, (500, 33, 2)), atol=1e-6)
    assert outcome.summary.excluded_paths == 0
    # initial wealth is the value of the shares plus the (zero at x0) net-trade value
    initial = [s.initial_value for s in outcome.summary.agents]
    assert sum(initial) == pytest.approx(float(econ.supply @ p.grid.value_at_x0(p.s[:, 0])), rel=1e-8)


def test_redundant_market_cannot_replicate(solved):
    econ, eq, p = solved("redundant")
    field = portfolio_field(p, p.s[1])
    assert field.singular.all()
    assert np.isnan(field.theta).all()
    with pytest.raises(SingularVolatilityError):
        replicating_portfolio(p, p.s[1], 5, (80,))
    paths = simulate_paths(econ.diffusion, econ.T, steps=8, n_paths=50, seed=23)
    outcome = simulate_radner(econ, eq, p, paths)
    assert outcome.summary.excluded_paths == 50
    assert outcome.summary.singular_fraction == 1.0
    assert not outcome.summary.valid


def test_terminal_value_matches_terminal_consumption(solved):
    econ, eq, p = solved("log1_two_agents")
    alloc = eq.on_grid(econ, p.grid)
    for i in range(econ.I):
        v = net_trade_value(econ, eq, p, i)
        wealth = econ.shares[i] @ p.s[:, -1] + v[-1] + alloc.entitlement_terminal[i] * alloc.psi_terminal
        np.testing.assert_allclose(wealth, alloc.consumption_terminal[i] * alloc.psi_terminal, rtol=1e-10)


def test_wealth_plus_entitlements_stays_positive(solved):
    econ, eq, p = solved("log1_two_agents")
    paths = simulate_paths(econ.diffusion, econ.T, steps=32, n_paths=500, seed=24)
    summary = simulate_radner(econ, eq, p, paths).summary
    assert all(a.admissibility_margin > 0.0 for a in summary.agents)
    for a in summary.agents:
        assert a.terminal_replication_rms <= 5.0 * a.mid_replication_rms + 1e-12


def test_two_factor_portfolios_clear(economy, quadrature, plane_grid):
    econ = economy("two_factor")
    eq = negishi_solve(econ, quad=quadrature, grid=plane_grid)
    assert eq.converged
    p = price_all_assets(econ, eq, plane_grid)
    paths = simulate_paths(econ.diffusion, econ.T, steps=10, n_paths=200, seed=25)
    outcome = simulate_radner(econ, eq, p, paths)
    assert outcome.theta.shape == (2, 200, 11, 3)
    assert outcome.summary.portfolio_clearing_max <= 1e-6
    assert outcome.summary.consumption_clearing_max <= 1e-10


@pytest.mark.slow
def test_replication_error_shrinks_like_root_dt(economy, quadrature):
    econ = economy("log1_two_agents")
    g = build_grid(Box.from_bounds([-8.0], [8.0]), [321], 1.0, 160, x0=[0.0])
    eq = negishi_solve(econ, quad=quadrature, grid=g)
    p = price_all_assets(econ, eq, g)
    steps = np.array([10, 20, 40, 80])
    rms = []
    for n in steps:
        paths = simulate_paths(econ.diffusion, econ.T, steps=int(n), n_paths=2000, seed=26)
        rms.append(simulate_radner(econ, eq, p, paths).summary.agents[0].terminal_replication_rms)
    slope = np.polyfit(np.log(1.0 / steps), np.log(rms), 1)[0]
    assert 0.35 <= slope <= 0.65, rms
