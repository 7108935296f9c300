"""
Implementation of the Arrow-Debreu allocation by sequential trade.

Agent i holds its initial shares n^i plus the replicating portfolio of its
net-trade value v^i, so its wealth is V^i = n^i . s + v^i and the budget
dynamics read

    dV^i = theta^i . dG + (e^i - c^i) psi dt.

Portfolios live on grid nodes and are interpolated multilinearly to path states.
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from radner.config import settings
from radner.core.completeness import NormalizedPrices, normalize_prices, row_floor, scaled_det
from radner.core.economy import Economy
from radner.core.markov import Grid, PathBundle
from radner.core.planner import ADEquilibrium
from radner.core.pricing import PricingSolution, build_gains, present_value_field
from radner.exceptions import SingularVolatilityError
from radner.models import AgentRadnerStats, RadnerSummary
from radner.utils.logger import logger


def net_trade_value(econ: Economy, eq: ADEquilibrium, p: PricingSolution, i: int,
                    g: Optional[Grid] = None) -> np.ndarray:
    """v^i(t, x) = E[int_t^T (c^i - eps^i) psi nu | X_t = x]."""
    g = p.grid if g is None else g
    alloc = eq.on_grid(econ, g)
    scheme = p.scheme if g is p.grid else None
    return present_value_field(econ, eq, g, alloc.consumption[i] - alloc.endowment[i],
                               alloc.consumption_terminal[i] - alloc.endowment_terminal[i],
                               scheme=scheme, theta=p.theta)


def endowment_value_field(econ: Economy, eq: ADEquilibrium, p: PricingSolution, i: int) -> np.ndarray:
    """w^i(t, x) = E[int_t^T e^i psi nu | X_t = x], the continuation value of the entitlement."""
    alloc = eq.on_grid(econ, p.grid)
    return present_value_field(econ, eq, p.grid, alloc.entitlement[i], alloc.entitlement_terminal[i],
                               scheme=p.scheme, theta=p.theta)


def _solve_exposures(s: np.ndarray, r: np.ndarray, Dr: np.ndarray, sigma: np.ndarray,
                     v: np.ndarray, dv_tilde: np.ndarray, threshold: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Batched replication. ``r`` (..., K), ``Dr`` and ``sigma`` (..., K, K),
    ``v`` (...), ``dv_tilde`` (..., K). Returns theta (..., K+1) and the
    singular-node mask; theta is NaN where the volatility matrix is degenerate.
    """
    A = np.swapaxes(Dr @ sigma, -1, -2)
    vol = (Dr / r[..., :, None]) @ sigma
    singular = np.asarray(scaled_det(vol, row_floor(sigma)) < threshold)
    safe = np.where(singular[..., None, None], np.eye(A.shape[-1]), A)
    rhs = np.swapaxes(sigma, -1, -2) @ dv_tilde[..., None]
    risky = np.linalg.solve(safe, rhs)[..., 0]
    bond = v / s - np.sum(risky * r, axis=-1)
    theta = np.concatenate([bond[..., None], risky], axis=-1)
    theta[singular] = np.nan
    return theta, singular


@dataclass(frozen=True, eq=False)
class PortfolioField:
    theta: np.ndarray       # (K+1, M+1, *shape)
    singular: np.ndarray    # (M+1, *shape)


def portfolio_field(p: PricingSolution, v: np.ndarray, normalized: Optional[NormalizedPrices] = None,
                    threshold: Optional[float] = None) -> PortfolioField:
    """
    Replicating portfolio of the value field ``v`` at every node, in numeraire
    units: (Dr sigma)^T theta_{1..K} = sigma^T grad(v / s0) and
    theta_0 = v / s0 - sum_k theta_k r^k.
    """
    threshold = settings.det_threshold if threshold is None else threshold
    nz = normalize_prices(p) if normalized is None else normalized
    g = p.grid
    s0 = p.s[0]
    v_tilde = v / s0
    theta, singular = _solve_exposures(
        s0, np.moveaxis(nz.r, 0, -1), np.moveaxis(nz.Dr, 0, -2), p.dispersion[None],
        v, g.spatial_gradient(v_tilde), threshold,
    )
    return PortfolioField(theta=np.moveaxis(theta, -1, 0), singular=singular)


def replicating_portfolio(p: PricingSolution, v: np.ndarray, t_index: int, x_index: Tuple[int, ...],
                          normalized: Optional[NormalizedPrices] = None,
                          threshold: Optional[float] = None) -> np.ndarray:
    """theta (length K+1) replicating ``v`` at the grid node (t_index, x_index)."""
    threshold = settings.det_threshold if threshold is None else threshold
    nz = normalize_prices(p) if normalized is None else normalized
    x_index = tuple(x_index)
    node = (t_index, *x_index)
    s0 = p.s[0][node]
    grad = p.grid.spatial_gradient(v / p.s[0])[node]
    theta, singular = _solve_exposures(
        np.asarray(s0), nz.r[(slice(None),) + node], nz.Dr[(slice(None),) + node],
        p.dispersion[x_index], np.asarray(v[node]), grad, threshold,
    )
    if singular:
        raise SingularVolatilityError(
            "volatility matrix is singular at the node, the plan cannot be replicated",
            t=float(p.grid.times[t_index]), x=p.grid.points[x_index].tolist(),
        )
    return theta


@dataclass(frozen=True, eq=False)
class RadnerOutcome:
    theta: np.ndarray                   # (I, n_paths, steps+1, K+1)
    values: np.ndarray                  # (I, n_paths, steps+1), simulated wealth
    replication_error: np.ndarray       # (I, n_paths, steps+1)
    portfolio_clearing: np.ndarray      # (steps+1,), max over paths of |sum_i theta^i - N| / |N|
    consumption_clearing: float
    excluded: np.ndarray                # (n_paths,) bool
    summary: RadnerSummary


def simulate_radner(econ: Economy, eq: ADEquilibrium, p: PricingSolution, paths: PathBundle,
                    threshold: Optional[float] = None) -> RadnerOutcome:
    """
    Run every agent's budget identity along the simulated paths and compare
    the financed wealth with the model value n^i . s + v^i.
    """
    threshold = settings.det_threshold if threshold is None else threshold
    g = p.grid
    alloc = eq.on_grid(econ, g)
    nz = normalize_prices(p)
    I, K = econ.I, econ.K
    X, times = paths.states, paths.times
    tt = np.broadcast_to(times, X.shape[:2])
    gains = build_gains(p, paths)
    dG = gains.increments                                   # (K+1, n, steps)
    dt = np.diff(times)

    inside = g.box.contains(X)
    exited = ~np.all(inside, axis=1)
    exit_frac = float(np.mean(exited))
    if exit_frac > settings.max_exit_fraction:
        logger.warning(f"{exit_frac:.2%} of paths leave the grid box; states are clamped to its faces")

    singular_paths = np.zeros(paths.n_paths, dtype=bool)
    theta_paths, values, errors = [], [], []
    shares = econ.shares
    for i in range(I):
        v = net_trade_value(econ, eq, p, i)
        field = portfolio_field(p, v, nz, threshold)
        singular_paths |= np.any(g.interpolate(field.singular.astype(float), tt, X) > 0.0, axis=1)
        theta_grid = np.where(np.isnan(field.theta), 0.0, field.theta)
        theta_v = np.stack([g.interpolate(theta_grid[k], tt, X) for k in range(K + 1)], axis=-1)
        theta_i = theta_v + shares[i]

        model_value = gains.prices.transpose(1, 2, 0) @ shares[i] + g.interpolate(v, tt, X)
        net_flow = g.interpolate((alloc.entitlement[i] - alloc.consumption[i]) * alloc.psi, tt, X)
        increments = np.einsum("npk,knp->np", theta_i[:, :-1], dG) + 0.5 * dt * (net_flow[:, :-1] + net_flow[:, 1:])
        wealth = np.empty_like(model_value)
        wealth[:, 0] = model_value[:, 0]
        wealth[:, 1:] = model_value[:, :1] + np.cumsum(increments, axis=1)

        theta_paths.append(theta_i)
        values.append(wealth)
        errors.append(wealth - model_value)

    theta_paths, values, errors = np.stack(theta_paths), np.stack(values), np.stack(errors)
    singular_frac = float(np.mean(singular_paths))
    if singular_frac > 0.0:
        logger.warning(f"{singular_frac:.3%} of paths meet a singular volatility node and are excluded")
    excluded = singular_paths
    keep = ~excluded if np.any(~excluded) else np.ones_like(excluded)

    N = econ.supply
    scale = max(1.0, float(np.linalg.norm(N)))
    clearing = np.linalg.norm(theta_paths.sum(axis=0) - N, axis=-1) / scale
    portfolio_clearing = np.max(clearing[keep], axis=0)
    consumption_clearing = float(np.max(np.abs(alloc.consumption.sum(axis=0) - alloc.aggregate) / alloc.aggregate))

    M = times.size - 1
    stats = []
    for i in range(I):
        w = endowment_value_field(econ, eq, p, i)
        margin = values[i] + g.interpolate(w, tt, X)
        err = errors[i][keep]
        rms = np.sqrt(np.mean(err ** 2, axis=0))
        stats.append(AgentRadnerStats(
            agent=i,
            initial_value=float(values[i][0, 0]),
            replication_rms=rms.tolist(),
            terminal_replication_rms=float(rms[-1]),
            mid_replication_rms=float(rms[M // 2]),
            max_replication_error=float(np.max(np.abs(err))),
            admissibility_margin=float(np.min(margin[keep])),
        ))

    valid = exit_frac <= settings.max_exit_fraction and singular_frac <= settings.max_singular_fraction
    summary = RadnerSummary(
        agents=stats,
        portfolio_clearing_max=float(portfolio_clearing.max()),
        consumption_clearing_max=consumption_clearing,
        exit_fraction=exit_frac,
        singular_fraction=singular_frac,
        excluded_paths=int(excluded.sum()),
        n_paths=paths.n_paths,
        steps=M,
        valid=valid,
    )
    logger.info(f"Radner simulation: {paths.n_paths} paths x {M} steps, portfolio clearing "
                f"{summary.portfolio_clearing_max:.2e}, valid={valid}")
    return RadnerOutcome(theta=theta_paths, values=values, replication_error=errors,
                         portfolio_clearing=portfolio_clearing, consumption_clearing=consumption_clearing,
                         excluded=excluded, summary=summary)
