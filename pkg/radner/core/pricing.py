"""
Present-value pricing. Nominal prices

    s^k(t, x) = E[ int_t^T m^k(u, X_u) nu(du) | X_t = x ],   m^k = g^k psi,

solve the backward Cauchy problem  d_t s + L s + m = 0,  s(T) = m(T)  on the
truncated grid; a Monte-Carlo estimator of the same expectation serves as an
independent oracle.
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from radner.config import settings
from radner.core.economy import DiffusionSpec, Economy, aggregate_endowment
from radner.core.markov import Grid, PathBundle, exit_fraction, generator_matrix, simulate_paths
from radner.core.planner import ADEquilibrium, GridAllocation, sharing_rule
from radner.exceptions import NumeraireError, PDESolveError
from radner.models import MartingaleCheck, MartingaleReport, PricingDiagnostics
from radner.utils.logger import logger

BLOWUP_FACTOR = 1e8


def _extrapolation_rows(g: Grid) -> Tuple[np.ndarray, sp.csr_matrix]:
    """
    Zero second derivative across the box face: s_b - 2 s_{b+1} + s_{b+2} = 0
    along the first dimension in which node b sits on the boundary.
    """
    shape = g.shape
    strides = np.array([int(np.prod(shape[d + 1:])) for d in range(g.K)])
    boundary = np.flatnonzero(~g.interior_mask.ravel())
    index = np.stack(np.unravel_index(boundary, shape), axis=-1)
    on_low = index == 0
    on_high = index == np.array(shape) - 1
    dim = np.argmax(on_low | on_high, axis=-1)
    rows = np.arange(boundary.size)
    inward = np.where(on_low[rows, dim], 1, -1) * strides[dim]
    r = np.repeat(boundary, 3)
    c = np.stack([boundary, boundary + inward, boundary + 2 * inward], axis=-1).ravel()
    v = np.tile([1.0, -2.0, 1.0], boundary.size)
    E = sp.csr_matrix((v, (r, c)), shape=(g.n_nodes, g.n_nodes))
    return boundary, E


class ThetaScheme:
    """
    Backward theta-stepping for d_t s + L s + m = 0 with extrapolated lateral
    boundaries. One sparse LU per distinct (dt, theta) pair.
    """

    def __init__(self, L: sp.spmatrix, g: Grid):
        self.L = L.tocsr()
        self.grid = g
        n = g.n_nodes
        interior = g.interior_mask.ravel().astype(float)
        self._keep = sp.diags(interior)
        self._interior = interior
        _, self._E = _extrapolation_rows(g)
        self._eye = sp.identity(n, format="csr")
        self._factors: Dict[Tuple[float, float], object] = {}

    def _factor(self, dt: float, theta: float):
        key = (dt, theta)
        if key not in self._factors:
            A = (self._keep @ (self._eye - theta * dt * self.L) + self._E).tocsc()
            try:
                self._factors[key] = splu(A)
            except RuntimeError as e:
                raise PDESolveError(f"implicit system is singular (dt={dt:g}, theta={theta:g}): {e}",
                                    dt=dt, theta=theta) from e
            logger.debug(f"factorised theta-system dt={dt:g}, theta={theta:g}")
        return self._factors[key]

    def step(self, s_next: np.ndarray, m_now: np.ndarray, m_next: np.ndarray, dt: float, theta: float) -> np.ndarray:
        rhs = s_next + (1.0 - theta) * dt * (self.L @ s_next) + dt * (theta * m_now + (1.0 - theta) * m_next)
        return self._factor(dt, theta).solve(rhs * self._interior)


def solve_feynman_kac(d: DiffusionSpec, source: np.ndarray, terminal: np.ndarray, g: Grid,
                      theta: Optional[float] = None, rannacher_steps: Optional[int] = None,
                      L: Optional[sp.spmatrix] = None, scheme: Optional[ThetaScheme] = None) -> np.ndarray:
    """
    March s from s(T) = terminal back to t = 0. ``source`` has shape
    ``(M+1, *shape)``; the result has the same shape with s[M] == terminal.
    Startup uses ``rannacher_steps`` implicit Euler half steps, two per interval.
    """
    theta = settings.theta if theta is None else theta
    rannacher_steps = settings.rannacher_steps if rannacher_steps is None else rannacher_steps
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [0, 1], got {theta}")
    M = g.times.size - 1
    source = np.asarray(source, dtype=float)
    if source.shape != (M + 1,) + g.shape:
        raise ValueError(f"source has shape {source.shape}, expected {(M + 1,) + g.shape}")
    if not np.all(np.isfinite(source)) or not np.all(np.isfinite(terminal)):
        raise PDESolveError("source or terminal data is not finite on the grid")

    if scheme is None:
        scheme = ThetaScheme(generator_matrix(d, g) if L is None else L, g)
    dt = g.dt
    m = source.reshape(M + 1, -1)
    startup = (rannacher_steps + 1) // 2
    s = np.empty((M + 1, g.n_nodes))
    s[M] = np.asarray(terminal, dtype=float).ravel()
    ceiling = BLOWUP_FACTOR * max(1.0, float(np.max(np.abs(s[M]))) + g.T * float(np.max(np.abs(m))))

    for n in range(M - 1, -1, -1):
        if M - 1 - n < startup:
            half = 0.5 * dt
            m_mid = 0.5 * (m[n] + m[n + 1])
            mid = scheme.step(s[n + 1], m_mid, m_mid, half, 1.0)
            s[n] = scheme.step(mid, m[n], m[n], half, 1.0)
        else:
            s[n] = scheme.step(s[n + 1], m[n], m[n + 1], dt, theta)
        if not np.all(np.isfinite(s[n])) or np.max(np.abs(s[n])) > ceiling:
            raise PDESolveError(f"solution norm exploded at time index {n}", time_index=n)

    return s.reshape((M + 1,) + g.shape)


def pde_residual(s: np.ndarray, source: np.ndarray, L: sp.spmatrix, g: Grid) -> float:
    """max over interior nodes of |d_t s + L s + m|, with d_t by central differences in time."""
    M = g.times.size - 1
    ds_dt = np.gradient(s, g.times, axis=0, edge_order=2 if M >= 2 else 1)
    Ls = (L @ s.reshape(M + 1, -1).T).T.reshape(s.shape)
    r = np.abs(ds_dt + Ls + source)
    return float(np.max(r[:, g.interior_mask]))

# ============= Monte-Carlo oracle =============

def mc_expectation(d: DiffusionSpec, source: Callable[[float, np.ndarray], np.ndarray],
                   terminal: Callable[[np.ndarray], np.ndarray], t: float, x: Sequence[float],
                   n_paths: int, steps: int, seed: int, T: float) -> Tuple[float, float]:
    """
    Estimate E[int_t^T m(u, X_u) du + terminal(X_T) | X_t = x] with a
    trapezoid time integral; returns (estimate, standard error).
    """
    if t >= T:
        raise ValueError(f"start time {t} must lie before the horizon {T}")
    bundle = simulate_paths(d, T, steps=steps, n_paths=n_paths, seed=seed, x0=x, t0=t)
    X = bundle.states
    flow = np.stack([np.broadcast_to(source(u, X[:, j]), X.shape[:1]) for j, u in enumerate(bundle.times)], axis=-1)
    weights = np.full(bundle.times.shape, bundle.dt)
    weights[[0, -1]] *= 0.5
    samples = flow @ weights + np.broadcast_to(terminal(X[:, -1]), X.shape[:1])
    stderr = float(np.std(samples, ddof=1) / np.sqrt(samples.size)) if samples.size > 1 else 0.0
    return float(np.mean(samples)), stderr

# ============= Equilibrium prices =============

@dataclass(frozen=True, eq=False)
class PricingSolution:
    grid: Grid
    s: np.ndarray           # (K+1, M+1, *shape)
    ds_dx: np.ndarray       # (K+1, M+1, *shape, K)
    source: np.ndarray      # (K+1, M+1, *shape), m^k = g^k psi
    terminal: np.ndarray    # (K+1, *shape), g^k(T) psi(T)
    theta: float
    rannacher_steps: int
    residuals: np.ndarray   # (K+1,)
    allocation: GridAllocation
    dispersion: np.ndarray  # (*shape, K, K), sigma at every node
    scheme: ThetaScheme = field(repr=False)

    @property
    def generator(self) -> sp.csr_matrix:
        return self.scheme.L

    def diagnostics(self) -> PricingDiagnostics:
        g = self.grid
        initial = self.s[:, 0]
        at_x0 = g.value_at_x0(initial).tolist() if g.x0_index is not None else []
        return PricingDiagnostics(
            theta=self.theta,
            time_steps=g.times.size - 1,
            rannacher_steps=self.rannacher_steps,
            nodes=list(g.shape),
            max_pde_residual=self.residuals.tolist(),
            min_numeraire_price=float(np.min(self.s[0][:, g.interior_mask])),
            initial_prices=at_x0,
        )


def present_value_field(econ: Economy, eq: ADEquilibrium, g: Grid, flow: np.ndarray, terminal: np.ndarray,
                        scheme: Optional[ThetaScheme] = None, theta: Optional[float] = None) -> np.ndarray:
    """Value E_t[int_t^T z psi nu] of a net consumption plan z given on the grid."""
    alloc = eq.on_grid(econ, g)
    return solve_feynman_kac(econ.diffusion, flow * alloc.psi, terminal * alloc.psi_terminal, g,
                             theta=theta, scheme=scheme)


def _numeraire_guard(s0: np.ndarray, g: Grid):
    inner = s0[:, g.interior_mask]
    if np.all(inner > 0.0):
        return
    n, j = np.unravel_index(int(np.argmin(inner)), inner.shape)
    node = g.points[g.interior_mask][j]
    raise NumeraireError(
        "numeraire price s0 is not strictly positive on the interior grid",
        t=float(g.times[n]), x=node.tolist(), value=float(inner[n, j]),
    )


def price_all_assets(econ: Economy, eq: ADEquilibrium, g: Grid,
                     theta: Optional[float] = None, rannacher_steps: Optional[int] = None) -> PricingSolution:
    """Solve the K+1 pricing problems for the equilibrium state-price density."""
    theta = settings.theta if theta is None else theta
    rannacher_steps = settings.rannacher_steps if rannacher_steps is None else rannacher_steps
    alloc = eq.on_grid(econ, g)
    scheme = ThetaScheme(generator_matrix(econ.diffusion, g), g)
    X = g.points[None]
    tt = g.times.reshape((-1,) + (1,) * g.K)

    sources, terminals, prices = [], [], []
    for k, asset in enumerate(econ.assets):
        if asset.is_numeraire_bond:
            m = np.zeros_like(alloc.psi)
        else:
            m = asset.dividend(tt, X) * alloc.psi
        mT = asset.terminal(g.T, g.points) * alloc.psi_terminal
        logger.debug(f"pricing asset {k}")
        prices.append(solve_feynman_kac(econ.diffusion, m, mT, g, theta=theta,
                                        rannacher_steps=rannacher_steps, scheme=scheme))
        sources.append(m)
        terminals.append(mT)

    s = np.stack(prices)
    _numeraire_guard(s[0], g)
    source = np.stack(sources)
    residuals = np.array([pde_residual(s[k], source[k], scheme.L, g) for k in range(s.shape[0])])
    solution = PricingSolution(
        grid=g, s=s, ds_dx=g.spatial_gradient(s), source=source, terminal=np.stack(terminals),
        theta=theta, rannacher_steps=rannacher_steps, residuals=residuals, allocation=alloc,
        dispersion=econ.diffusion.dispersion_at(g.points), scheme=scheme,
    )
    logger.info(f"Priced {s.shape[0]} assets on {list(g.shape)} x {g.times.size} nodes; "
                f"max PDE residual {float(residuals.max()):.2e}")
    return solution

# ============= Gains =============

@dataclass(frozen=True, eq=False)
class GainsSample:
    """G^k_t = s^k(t, X_t) + int_[0,t) m^k(u, X_u) du along simulated paths."""

    times: np.ndarray
    gains: np.ndarray        # (K+1, n_paths, steps+1)
    prices: np.ndarray       # (K+1, n_paths, steps+1)
    dividends: np.ndarray    # (K+1, n_paths, steps+1), m^k along the paths
    exit_fraction: float

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.gains, axis=-1)


def build_gains(p: PricingSolution, paths: PathBundle) -> GainsSample:
    g = p.grid
    X, times = paths.states, paths.times
    tt = np.broadcast_to(times, X.shape[:2])
    prices = np.stack([g.interpolate(p.s[k], tt, X) for k in range(p.s.shape[0])])
    flows = np.stack([g.interpolate(p.source[k], tt, X) for k in range(p.source.shape[0])])
    accumulated = np.zeros_like(prices)
    accumulated[..., 1:] = np.cumsum(0.5 * np.diff(times) * (flows[..., 1:] + flows[..., :-1]), axis=-1)
    return GainsSample(times=times, gains=prices + accumulated, prices=prices, dividends=flows,
                       exit_fraction=exit_fraction(paths, g.box))


def _default_pairs(times: np.ndarray, blocks: int = 4) -> List[Tuple[int, int]]:
    M = times.size - 1
    cuts = sorted(set(int(round(j * M / blocks)) for j in range(blocks + 1)))
    pairs = list(zip(cuts[:-1], cuts[1:]))
    if len(pairs) > 1:
        pairs.append((0, M))
    return pairs


def martingale_drift_test(gains: GainsSample, pairs: Optional[Sequence[Tuple[int, int]]] = None,
                          allowance: Optional[float] = None) -> MartingaleReport:
    """
    Mean of G_t2 - G_t1 per asset and time pair, flagged when it exceeds three
    standard errors plus a discretisation allowance relative to the gains level.
    """
    allowance = settings.drift_bias_allowance if allowance is None else allowance
    pairs = _default_pairs(gains.times) if pairs is None else pairs
    checks = []
    for k in range(gains.gains.shape[0]):
        for i1, i2 in pairs:
            diff = gains.gains[k, :, i2] - gains.gains[k, :, i1]
            mean = float(np.mean(diff))
            stderr = float(np.std(diff, ddof=1) / np.sqrt(diff.size)) if diff.size > 1 else 0.0
            scale = max(1.0, float(np.mean(np.abs(gains.gains[k, :, i1]))))
            flagged = abs(mean) > 3.0 * stderr + allowance * scale
            checks.append(MartingaleCheck(asset=k, t1=float(gains.times[i1]), t2=float(gains.times[i2]),
                                          mean=mean, stderr=stderr, flagged=flagged))
            if flagged:
                logger.warning(f"gains of asset {k} drift on [{gains.times[i1]:.3g}, {gains.times[i2]:.3g}]: "
                               f"mean {mean:.3e} vs stderr {stderr:.3e}")
    return MartingaleReport(checks=checks, allowance=allowance)


def asset_integrands(econ: Economy, eq: ADEquilibrium, k: int) -> Tuple[Callable, Callable]:
    """
    Off-grid (m^k, terminal) callables for the Monte-Carlo oracle, with psi
    from the sharing rule at the equilibrium weights.
    """
    flow, lump = aggregate_endowment(econ)
    asset = econ.assets[k]

    def source(t: float, X: np.ndarray) -> np.ndarray:
        if asset.is_numeraire_bond:
            return np.zeros(X.shape[:-1])
        _, psi = sharing_rule(econ.agents, eq.lam, t, flow(t, X))
        return asset.dividend(t, X) * psi

    def terminal(X: np.ndarray) -> np.ndarray:
        _, psi = sharing_rule(econ.agents, eq.lam, econ.T, lump(econ.T, X))
        return asset.terminal(econ.T, X) * psi

    return source, terminal


def restore_pricing(econ: Economy, eq: ADEquilibrium, g: Grid, arrays: Dict[str, np.ndarray]) -> PricingSolution:
    """Rebuild a PricingSolution from cached price arrays."""
    expected = (econ.K + 1, g.times.size) + g.shape
    if arrays["s"].shape != expected:
        raise ValueError(f"cached prices have shape {arrays['s'].shape}, expected {expected}")
    return PricingSolution(
        grid=g, s=arrays["s"], ds_dx=g.spatial_gradient(arrays["s"]), source=arrays["source"],
        terminal=arrays["terminal"], theta=float(arrays["theta"]), rannacher_steps=int(arrays["rannacher_steps"]),
        residuals=arrays["residuals"], allocation=eq.on_grid(econ, g),
        dispersion=econ.diffusion.dispersion_at(g.points),
        scheme=ThetaScheme(generator_matrix(econ.diffusion, g), g),
    )
