"""
Social planner: pointwise sharing rule, Monte-Carlo budget residuals and the
Negishi weight search that turns the planner allocation into an
Arrow-Debreu equilibrium.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from radner.config import settings
from radner.core.economy import CRRAUtility, Economy, aggregate_endowment, individual_endowment
from radner.core.markov import Grid, exit_fraction, simulate_paths
from radner.exceptions import ConvergenceError, DegenerateEconomyError
from radner.models import NegishiSummary, QuadratureConfig
from radner.utils.logger import logger

_LOG_WIDTH = 8.0 * np.finfo(float).eps


def _utilities(agents: Sequence) -> List[CRRAUtility]:
    return [getattr(a, "utility", a) for a in agents]


def inverse_marginal(utility: CRRAUtility, t, y) -> np.ndarray:
    """The consumption c with u_c(t, c) = y."""
    return utility.inverse_marginal(t, y)


def sharing_rule(agents: Sequence, lam: Sequence[float], t, agg,
                 tol: Optional[float] = None, max_iter: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Solve lambda^i u^i_c(t, x^i) = mu, sum_i x^i = agg for (x, mu).

    ``t`` and ``agg`` broadcast against each other; the result is
    ``x`` with shape ``(I, *shape)`` and ``mu`` with ``shape``. Total demand
    sum_i (u^i_c)^-1(t, mu / lambda^i) is strictly decreasing in mu, so the
    root is found by bisection in log mu.
    """
    utilities = _utilities(agents)
    lam = np.asarray(lam, dtype=float)
    I = len(utilities)
    if lam.shape != (I,) or np.any(lam <= 0.0):
        raise ValueError(f"need {I} strictly positive weights, got {lam.tolist()}")
    t, agg = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(agg, dtype=float))
    if np.any(agg <= 0.0):
        raise ValueError("aggregate endowment must be strictly positive")

    if I == 1:
        return agg[None].copy(), lam[0] * utilities[0].marginal(t, agg)

    tol = settings.sharing_tol if tol is None else tol
    max_iter = settings.sharing_max_iter if max_iter is None else max_iter
    log_lam = np.log(lam)

    def excess(log_mu: np.ndarray) -> np.ndarray:
        demand = sum(u.inverse_marginal(t, np.exp(log_mu - ll)) for u, ll in zip(utilities, log_lam))
        return demand - agg

    start = np.stack([ll + np.log(u.marginal(t, agg / I)) for u, ll in zip(utilities, log_lam)])
    lo, hi = start.min(axis=0), start.max(axis=0)

    # Rounding can leave the analytic bracket a hair short.
    step = 1.0
    for _ in range(64):
        low_short, high_short = excess(lo) < 0.0, excess(hi) > 0.0
        if not (np.any(low_short) or np.any(high_short)):
            break
        logger.debug(f"expanding sharing-rule bracket at {int(low_short.sum() + high_short.sum())} point(s)")
        lo = np.where(low_short, lo - step, lo)
        hi = np.where(high_short, hi + step, hi)
        step *= 2.0

    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        too_much = excess(mid) > 0.0
        lo = np.where(too_much, mid, lo)
        hi = np.where(too_much, hi, mid)
        if np.all(hi - lo <= _LOG_WIDTH * np.maximum(1.0, np.abs(mid))):
            break

    log_mu = 0.5 * (lo + hi)
    x = np.stack([u.inverse_marginal(t, np.exp(log_mu - ll)) for u, ll in zip(utilities, log_lam)])
    gap = np.abs(x.sum(axis=0) - agg)
    if np.any(gap > tol * agg):
        j = np.unravel_index(int(np.argmax(gap / agg)), agg.shape)
        raise ConvergenceError(
            f"sharing rule did not converge within {max_iter} bisections",
            bracket=[float(np.exp(lo[j])), float(np.exp(hi[j]))], aggregate=float(agg[j]),
        )
    return x, np.exp(log_mu)

# ============= Budget quadrature =============

class BudgetQuadrature:
    """
    Simulated paths with the aggregate and individual endowments evaluated
    along them. Built once and shared by every Negishi iteration (common
    random numbers).
    """

    def __init__(self, econ: Economy, config: QuadratureConfig):
        self.config = config
        bundle = simulate_paths(econ.diffusion, econ.T, steps=config.steps, n_paths=config.n_paths, seed=config.seed)
        X, times, T = bundle.states, bundle.times, econ.T
        flow, lump = aggregate_endowment(econ)
        self.times = times
        self.aggregate = np.array(flow(times, X))
        self.aggregate_terminal = np.array(lump(T, X[:, -1]))
        parts = [individual_endowment(econ, i) for i in range(econ.I)]
        self.endowments = np.stack([f(times, X) for f, _ in parts])
        self.endowments_terminal = np.stack([l(T, X[:, -1]) for _, l in parts])
        self.weights = np.full(times.shape, bundle.dt)
        self.weights[[0, -1]] *= 0.5
        self.exit_fraction = exit_fraction(bundle, econ.region)
        if self.exit_fraction > settings.max_exit_fraction:
            logger.warning(f"{self.exit_fraction:.2%} of quadrature paths leave the verification region")

    def integrate(self, flow_values: np.ndarray, terminal_values: np.ndarray) -> np.ndarray:
        """Per-path integral against nu: trapezoid on [0, T] plus the lump at T."""
        return flow_values @ self.weights + terminal_values


@dataclass(frozen=True)
class BudgetTerms:
    residuals: np.ndarray
    endowment_values: np.ndarray

    @property
    def relative(self) -> np.ndarray:
        return self.residuals / self.endowment_values


def _as_quadrature(econ: Economy, quad: Union[QuadratureConfig, BudgetQuadrature, None]) -> BudgetQuadrature:
    if isinstance(quad, BudgetQuadrature):
        return quad
    if quad is None:
        quad = QuadratureConfig(n_paths=settings.mc_paths, steps=settings.mc_steps, seed=settings.seed)
    return BudgetQuadrature(econ, quad)


def _budget_terms(econ: Economy, lam: np.ndarray, q: BudgetQuadrature) -> BudgetTerms:
    x, psi = sharing_rule(econ.agents, lam, q.times, q.aggregate)
    xT, psiT = sharing_rule(econ.agents, lam, econ.T, q.aggregate_terminal)
    net = q.integrate(psi * (x - q.endowments), psiT * (xT - q.endowments_terminal))
    value = q.integrate(psi * q.endowments, psiT * q.endowments_terminal)
    return BudgetTerms(residuals=net.mean(axis=-1), endowment_values=value.mean(axis=-1))


def budget_residuals(econ: Economy, lam: Sequence[float],
                     quad: Union[QuadratureConfig, BudgetQuadrature, None] = None) -> np.ndarray:
    """r_i = E int_0^T psi (c^i - eps^i) nu(dt), one entry per agent."""
    return _budget_terms(econ, np.asarray(lam, dtype=float), _as_quadrature(econ, quad)).residuals

# ============= Equilibrium =============

@dataclass(frozen=True, eq=False)
class GridAllocation:
    """Planner allocation on a space-time grid; time is the first grid axis."""

    grid: Grid
    aggregate: np.ndarray               # (M+1, *shape)
    aggregate_terminal: np.ndarray      # (*shape)
    psi: np.ndarray                     # (M+1, *shape)
    psi_terminal: np.ndarray            # (*shape)
    consumption: np.ndarray             # (I, M+1, *shape)
    consumption_terminal: np.ndarray    # (I, *shape)
    endowment: np.ndarray               # (I, M+1, *shape), eps^i before trade
    endowment_terminal: np.ndarray      # (I, *shape)
    entitlement: np.ndarray             # (I, M+1, *shape), e^i only
    entitlement_terminal: np.ndarray    # (I, *shape)


@dataclass(frozen=True, eq=False)
class ADEquilibrium:
    lam: np.ndarray
    residuals: np.ndarray
    relative_residuals: np.ndarray
    endowment_values: np.ndarray
    converged: bool
    iterations: int
    allocation: Optional[GridAllocation] = None

    def summary(self, utilities: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> NegishiSummary:
        return NegishiSummary(
            weights=self.lam.tolist(),
            converged=self.converged,
            iterations=self.iterations,
            residuals=self.residuals.tolist(),
            relative_residuals=self.relative_residuals.tolist(),
            endowment_values=self.endowment_values.tolist(),
            expected_utility=[] if utilities is None else utilities[0].tolist(),
            endowment_utility=[] if utilities is None else utilities[1].tolist(),
        )

    def on_grid(self, econ: Economy, g: Grid) -> GridAllocation:
        if self.allocation is not None and self.allocation.grid is g:
            return self.allocation
        return assemble_allocation(econ, self.lam, g)


def assemble_allocation(econ: Economy, lam: Sequence[float], g: Grid) -> GridAllocation:
    """c^i(t, x) = x^i(t, eps(t, x)) and psi(t, x) = mu(t, eps(t, x)) at every node."""
    lam = np.asarray(lam, dtype=float)
    X = g.points[None]
    tt = g.times.reshape((-1,) + (1,) * g.K)
    flow, lump = aggregate_endowment(econ)
    agg = np.array(flow(tt, X))
    agg_T = np.array(lump(g.T, g.points))
    c, psi = sharing_rule(econ.agents, lam, tt, agg)
    c_T, psi_T = sharing_rule(econ.agents, lam, g.T, agg_T)
    parts = [individual_endowment(econ, i) for i in range(econ.I)]
    return GridAllocation(
        grid=g,
        aggregate=agg,
        aggregate_terminal=agg_T,
        psi=psi,
        psi_terminal=psi_T,
        consumption=c,
        consumption_terminal=c_T,
        endowment=np.stack([np.broadcast_to(f(tt, X), agg.shape) for f, _ in parts]),
        endowment_terminal=np.stack([np.broadcast_to(l(g.T, g.points), agg_T.shape) for _, l in parts]),
        entitlement=np.stack([np.broadcast_to(a.entitlement(tt, X), agg.shape) for a in econ.agents]),
        entitlement_terminal=np.stack([np.broadcast_to(a.terminal_entitlement(g.T, g.points), agg_T.shape)
                                       for a in econ.agents]),
    )


def _initial_weights(econ: Economy, q: BudgetQuadrature) -> Tuple[np.ndarray, np.ndarray]:
    values = _budget_terms(econ, np.ones(econ.I), q).endowment_values
    share = values / values.sum()
    degenerate = np.flatnonzero(share <= 1e-12)
    if degenerate.size:
        i = int(degenerate[0])
        raise DegenerateEconomyError(
            f"agent {i} has (numerically) zero endowment value; a zero Negishi weight is not an equilibrium",
            agent=i, endowment_value=float(values[i]),
        )
    gammas = np.array([a.utility.gamma for a in econ.agents])
    return np.power(values / values[0], gammas), values


def negishi_solve(econ: Economy, tol: Optional[float] = None,
                  quad: Union[QuadratureConfig, BudgetQuadrature, None] = None,
                  grid: Optional[Grid] = None, max_iter: Optional[int] = None,
                  backtrack_fac: float = 0.5, max_backtrack: int = 30) -> ADEquilibrium:
    """
    Find weights with lambda^1 = 1 and max_i |r_i| / E int psi eps^i <= tol.

    Broyden iteration on log lambda^2..I with a finite-difference initial
    Jacobian and backtracking. A non-converged run returns the best iterate
    with ``converged=False``.
    """
    tol = settings.negishi_tol if tol is None else tol
    max_iter = settings.negishi_max_iter if max_iter is None else max_iter
    q = _as_quadrature(econ, quad)
    I = econ.I

    def solution(lam: np.ndarray, terms: BudgetTerms, converged: bool, it: int) -> ADEquilibrium:
        return ADEquilibrium(
            lam=lam, residuals=terms.residuals, relative_residuals=terms.relative,
            endowment_values=terms.endowment_values, converged=converged, iterations=it,
            allocation=None if grid is None else assemble_allocation(econ, lam, grid),
        )

    if I == 1:
        lam = np.ones(1)
        logger.info("Single agent: no-trade equilibrium, lambda = (1)")
        return solution(lam, _budget_terms(econ, lam, q), True, 0)

    lam0, _ = _initial_weights(econ, q)

    def weights(z: np.ndarray) -> np.ndarray:
        return np.concatenate([[1.0], np.exp(z)])

    def f(z: np.ndarray) -> Tuple[np.ndarray, BudgetTerms]:
        terms = _budget_terms(econ, weights(z), q)
        return terms.relative[1:], terms

    z = np.log(lam0[1:])
    y, terms = f(z)
    best = (np.max(np.abs(terms.relative)), z.copy(), terms)

    # a. initial Jacobian by forward differences
    h = 1e-6
    jac = np.empty((I - 1, I - 1))
    for j in range(I - 1):
        dz = np.zeros(I - 1)
        dz[j] = h
        jac[:, j] = (f(z + dz)[0] - y) / h

    # b. iterate
    for it in range(max_iter + 1):
        err = float(np.max(np.abs(terms.relative)))
        logger.debug(f"negishi it = {it:3d} -> max. rel. residual = {err:8.1e}, lambda = {weights(z).tolist()}")
        if err < best[0]:
            best = (err, z.copy(), terms)
        if err <= tol:
            logger.info(f"Negishi converged in {it} iteration(s): lambda = {weights(z).tolist()}")
            return solution(weights(z), terms, True, it)
        if it == max_iter:
            break

        try:
            dx = np.linalg.solve(jac, -y)
        except np.linalg.LinAlgError:
            logger.warning("singular Broyden Jacobian, stopping the Negishi iteration")
            break

        # evaluate with backtracking
        for _ in range(max_backtrack):
            try:
                ynew, tnew = f(z + dx)
                if not np.all(np.isfinite(ynew)) or np.max(np.abs(ynew)) > 2.0 * np.max(np.abs(y)) + tol:
                    raise ValueError
            except (ValueError, ConvergenceError):
                dx *= backtrack_fac
            else:
                dy = ynew - y
                jac = jac + np.outer((dy - jac @ dx) / np.dot(dx, dx), dx)
                z, y, terms = z + dx, ynew, tnew
                break
        else:
            logger.warning("too many backtracks in the Negishi iteration")
            break

    err, zb, tb = best
    logger.warning(f"Negishi did not converge: best max. rel. residual {err:.2e} > tol {tol:.1e}; returning best iterate")
    return solution(weights(zb), tb, False, max_iter)


def expected_utilities(econ: Economy, lam: Sequence[float],
                       quad: Union[QuadratureConfig, BudgetQuadrature, None] = None) -> Tuple[np.ndarray, np.ndarray]:
    """(E int u^i(t, c^i) nu, E int u^i(t, eps^i) nu) per agent."""
    q = _as_quadrature(econ, quad)
    lam = np.asarray(lam, dtype=float)
    x, _ = sharing_rule(econ.agents, lam, q.times, q.aggregate)
    xT, _ = sharing_rule(econ.agents, lam, econ.T, q.aggregate_terminal)
    planned, endowed = [], []
    for i, agent in enumerate(econ.agents):
        u = agent.utility
        planned.append(q.integrate(u.value(q.times, x[i]), u.value(econ.T, xT[i])).mean())
        endowed.append(q.integrate(u.value(q.times, q.endowments[i]), u.value(econ.T, q.endowments_terminal[i])).mean())
    return np.array(planned), np.array(endowed)
