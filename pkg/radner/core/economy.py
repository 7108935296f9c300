"""
Economy definitions and executable checks of the standing assumptions.

Assumptions are verified on the user-declared compact verification region
(and on the rank region V for the terminal full-rank condition), never on
all of R^K; every verdict therefore carries ``region_relative=True``.
"""
import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import ValidationError
from scipy.stats import qmc

from radner.core import exprlang as el
from radner.core.exprlang import Expr
from radner.exceptions import AssumptionViolation, EconomyConfigError, ExprDomainError, ExprSyntaxError
from radner.models import AssumptionCheck, EconomyDocument, ValidationReport
from radner.utils.logger import logger

ELLIPTICITY_FLOOR = 1e-12
RANK_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def from_bounds(cls, lo, hi) -> "Box":
        return cls(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))

    @property
    def K(self) -> int:
        return self.lo.shape[0]

    def corners(self) -> np.ndarray:
        return np.array(list(itertools.product(*zip(self.lo, self.hi))), dtype=float)

    def contains(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.all((X >= self.lo) & (X <= self.hi), axis=-1)

    def clip(self, X: np.ndarray) -> np.ndarray:
        return np.clip(X, self.lo, self.hi)

    def sample(self, n: int, seed: int) -> np.ndarray:
        """Scrambled Halton points plus every corner of the box."""
        points = qmc.Halton(d=self.K, scramble=True, seed=seed).random(n)
        return np.vstack([qmc.scale(points, self.lo, self.hi), self.corners()])


@dataclass(frozen=True)
class CRRAUtility:
    """u(t, c) = exp(-rho t) c^(1-gamma) / (1-gamma), log utility when gamma == 1."""

    gamma: float
    rho: float = 0.0

    @property
    def is_log(self) -> bool:
        return self.gamma == 1.0

    def value(self, t, c):
        discount = np.exp(-self.rho * np.asarray(t, dtype=float))
        if self.is_log:
            return discount * np.log(c)
        return discount * np.power(c, 1.0 - self.gamma) / (1.0 - self.gamma)

    def marginal(self, t, c):
        return np.exp(-self.rho * np.asarray(t, dtype=float)) * np.power(c, -self.gamma)

    def inverse_marginal(self, t, y):
        """The consumption c with u_c(t, c) = y; defined for y > 0 only."""
        y = np.asarray(y, dtype=float)
        if not np.all(y > 0.0):
            bad = float(y.flat[int(np.argmax(~(y > 0.0).ravel()))])
            raise ExprDomainError("inverse marginal utility needs a strictly positive argument", f"I({bad:g})")
        return np.power(y * np.exp(self.rho * np.asarray(t, dtype=float)), -1.0 / self.gamma)

    def marginal_expr(self, c: Expr, t: Expr = el.Var(el.TIME)) -> Expr:
        discount = el.call("exp", el.neg(el.mul(el.Const(self.rho), t)))
        return el.mul(discount, el.power(c, el.Const(-self.gamma)))


@dataclass(frozen=True, eq=False)
class DiffusionSpec:
    """dX = b(X) dt + sigma(X) dW with autonomous coefficients."""

    K: int
    drift: Tuple[Expr, ...]
    sigma: Tuple[Tuple[Expr, ...], ...]
    x0: np.ndarray

    def drift_at(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.stack([b(0.0, X) for b in self.drift], axis=-1)

    def dispersion_at(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        rows = [np.stack([s(0.0, X) for s in row], axis=-1) for row in self.sigma]
        return np.stack(rows, axis=-2)

    def diffusion_at(self, X: np.ndarray) -> np.ndarray:
        """a(x) = sigma(x) sigma(x)^T."""
        s = self.dispersion_at(X)
        return np.einsum("...ij,...kj->...ik", s, s)


@dataclass(frozen=True, eq=False)
class AgentSpec:
    utility: CRRAUtility
    entitlement: Expr
    terminal_entitlement: Expr
    shares: np.ndarray


@dataclass(frozen=True, eq=False)
class AssetSpec:
    dividend: Expr
    terminal: Expr
    is_numeraire_bond: bool = False


@dataclass(frozen=True, eq=False)
class Economy:
    diffusion: DiffusionSpec
    agents: Tuple[AgentSpec, ...]
    assets: Tuple[AssetSpec, ...]
    T: float
    region: Box
    rank_region: Box
    document: EconomyDocument
    name: str = "economy"

    @property
    def I(self) -> int:
        return len(self.agents)

    @property
    def K(self) -> int:
        return self.diffusion.K

    @property
    def supply(self) -> np.ndarray:
        """N_k = sum_i n^i_k."""
        return np.sum([a.shares for a in self.agents], axis=0)

    @property
    def shares(self) -> np.ndarray:
        return np.array([a.shares for a in self.agents])

# ============= Loading =============

def _parse_field(text: str, K: int, where: str) -> Expr:
    try:
        return el.parse(text, K)
    except ExprSyntaxError as e:
        raise EconomyConfigError(
            f"cannot parse {where}: {e.message}",
            errors=[{"loc": where, "msg": e.message, "input": text}],
        ) from e


def _parse_state_field(text: str, K: int, where: str) -> Expr:
    expr = _parse_field(text, K, where)
    if expr.depends_on(el.TIME):
        raise EconomyConfigError(
            f"{where} must not depend on t (the state equation is autonomous)",
            errors=[{"loc": where, "msg": "time dependence", "input": text}],
        )
    return expr


def load_economy(config: Union[Dict[str, Any], EconomyDocument, str, Path]) -> Economy:
    """
    Build an Economy from a document (mapping, parsed model or JSON file path).
    Every expression is parsed before anything is returned, so a malformed field
    fails the whole load.
    """
    if isinstance(config, (str, Path)):
        config = json.loads(Path(config).read_text(encoding="utf-8"))

    try:
        doc = config if isinstance(config, EconomyDocument) else EconomyDocument.model_validate(config)
    except ValidationError as e:
        raise EconomyConfigError(
            f"economy document is invalid ({e.error_count()} error(s)): {e.errors()[0]['msg']}",
            errors=json.loads(e.json(include_url=False)),
        ) from e

    K, T = doc.diffusion.K, doc.T
    at_maturity = el.Const(T)

    drift = tuple(_parse_state_field(b, K, f"diffusion.b[{k}]") for k, b in enumerate(doc.diffusion.b))
    sigma = tuple(
        tuple(_parse_state_field(s, K, f"diffusion.sigma[{r}][{c}]") for c, s in enumerate(row))
        for r, row in enumerate(doc.diffusion.sigma)
    )
    diffusion = DiffusionSpec(K=K, drift=drift, sigma=sigma, x0=np.asarray(doc.diffusion.x0, dtype=float))

    agents = []
    for i, a in enumerate(doc.agents):
        entitlement = _parse_field(a.entitlement, K, f"agents[{i}].entitlement")
        agents.append(AgentSpec(
            utility=CRRAUtility(gamma=a.gamma, rho=a.rho),
            entitlement=entitlement,
            terminal_entitlement=el.substitute(entitlement, el.TIME, at_maturity),
            shares=np.asarray(a.shares, dtype=float),
        ))

    assets = []
    for k, a in enumerate(doc.assets):
        dividend = _parse_field(a.dividend, K, f"assets[{k}].dividend")
        terminal_text = a.terminal if a.terminal is not None else a.dividend
        terminal = el.substitute(_parse_field(terminal_text, K, f"assets[{k}].terminal"), el.TIME, at_maturity)
        if k == 0 and not (isinstance(dividend, el.Const) and dividend.value == 0.0):
            raise EconomyConfigError(
                "asset 0 is the zero-coupon bond and must have zero flow dividend",
                errors=[{"loc": "assets[0].dividend", "msg": "nonzero flow", "input": a.dividend}],
            )
        assets.append(AssetSpec(dividend=dividend, terminal=terminal, is_numeraire_bond=(k == 0)))

    econ = Economy(
        diffusion=diffusion,
        agents=tuple(agents),
        assets=tuple(assets),
        T=T,
        region=Box.from_bounds(doc.region.lo, doc.region.hi),
        rank_region=Box.from_bounds(doc.rank_region.lo, doc.rank_region.hi),
        document=doc,
        name=doc.name or "economy",
    )
    logger.debug(f"Loaded economy '{econ.name}': K={K}, I={econ.I}, T={T}")
    return econ

# ============= Endowments =============

def aggregate_endowment(econ: Economy) -> Tuple[Expr, Expr]:
    """
    (flow, lump) aggregate endowment: sum of entitlements plus the supply of every
    asset times its dividend. Asset 0 only contributes to the lump at T.
    """
    N = econ.supply
    flow = el.total(
        [a.entitlement for a in econ.agents]
        + [el.mul(el.Const(float(N[k])), asset.dividend) for k, asset in enumerate(econ.assets)]
    )
    lump = el.total(
        [a.terminal_entitlement for a in econ.agents]
        + [el.mul(el.Const(float(N[k])), asset.terminal) for k, asset in enumerate(econ.assets)]
    )
    return flow, lump


def individual_endowment(econ: Economy, i: int) -> Tuple[Expr, Expr]:
    """(flow, lump) endowment of agent i before trade: e^i + n^i . A."""
    agent = econ.agents[i]
    flow = el.total(
        [agent.entitlement]
        + [el.mul(el.Const(float(n)), asset.dividend) for n, asset in zip(agent.shares, econ.assets)]
    )
    lump = el.total(
        [agent.terminal_entitlement]
        + [el.mul(el.Const(float(n)), asset.terminal) for n, asset in zip(agent.shares, econ.assets)]
    )
    return flow, lump

# ============= Terminal full rank =============

def payoff_ratio_jacobian(econ: Economy) -> List[List[Expr]]:
    """Symbolic Dh with h^k = g^k(T, .) / g^0(T, .), k = 1..K."""
    g0 = econ.assets[0].terminal
    ratios = [el.div(asset.terminal, g0) for asset in econ.assets[1:]]
    return [el.gradient(h, econ.K) for h in ratios]


def min_abs_jacobian_det(econ: Economy, samples: int, seed: int) -> Tuple[float, np.ndarray, int]:
    """
    Minimum |det Dh| over low-discrepancy samples of the rank region.
    Raises AssumptionViolation where g^0(T, x) <= 0.
    """
    points = econ.rank_region.sample(samples, seed)
    g0 = econ.assets[0].terminal(econ.T, points)
    if np.any(g0 <= 0.0):
        where = points[int(np.argmax(g0 <= 0.0))]
        raise AssumptionViolation(
            "bond payoff g0(T, x) must be strictly positive on the rank region",
            assumption="A7", location=where.tolist(),
        )
    jac = payoff_ratio_jacobian(econ)
    K = econ.K
    D = np.empty((points.shape[0], K, K))
    for r in range(K):
        for c in range(K):
            D[:, r, c] = jac[r][c](econ.T, points)
    dets = np.abs(np.linalg.det(D))
    j = int(np.argmin(dets))
    return float(dets[j]), points[j], points.shape[0]

# ============= Validation =============

def _first_failure(fn: Callable[[np.ndarray], Any], points: np.ndarray) -> Optional[List[float]]:
    for p in points:
        try:
            fn(p[None, :])
        except ExprDomainError:
            return p.tolist()
    return None


def _guarded(assumption: str, fn: Callable[[], AssumptionCheck],
             replay: Optional[Callable[[np.ndarray], Any]] = None,
             points: Optional[np.ndarray] = None) -> AssumptionCheck:
    try:
        return fn()
    except ExprDomainError as e:
        location = _first_failure(replay, points) if replay is not None and points is not None else None
        return AssumptionCheck(assumption=assumption, verdict="FAIL", message=e.message, location=location)
    except AssumptionViolation as e:
        return AssumptionCheck(assumption=assumption, verdict="FAIL", message=e.message, location=e.location)


def _lipschitz(values_fn: Callable[[np.ndarray], np.ndarray], X: np.ndarray, Y: np.ndarray) -> float:
    dv = values_fn(X) - values_fn(Y)
    dv = dv.reshape(dv.shape[0], -1)
    dx = np.linalg.norm(X - Y, axis=-1)
    mask = dx > 0
    if not np.any(mask):
        return 0.0
    return float(np.max(np.linalg.norm(dv[mask], axis=-1) / dx[mask]))


def _felicity_evaluator(econ: Economy) -> Callable[[np.ndarray], Any]:
    endowments = [individual_endowment(econ, i) for i in range(econ.I)]

    def evaluate(P: np.ndarray):
        t, X = P[:, 0], P[:, 1:]
        for agent, (f_i, l_i) in zip(econ.agents, endowments):
            agent.utility.marginal(t, f_i(t, X))
            agent.utility.marginal(econ.T, l_i(econ.T, X))
    return evaluate


def validate_assumptions(econ: Economy, samples: int, seed: int, exit_paths: int = 0) -> ValidationReport:
    """
    Check the standing assumptions at sampled points of the verification region.
    Deterministic given ``seed``; analyticity claims are always UNVERIFIABLE.
    """
    d = econ.diffusion
    K, T = econ.K, econ.T
    rng = np.random.default_rng(seed)
    X = econ.region.sample(samples, seed)
    tx = econ.region.sample(samples, seed + 1)
    times = qmc.Halton(d=1, scramble=True, seed=seed + 2).random(tx.shape[0])[:, 0] * T
    flow, lump = aggregate_endowment(econ)
    checks: List[AssumptionCheck] = []

    # (t, x) rows for locating domain failures: interior times, then t = T
    located = np.vstack([np.column_stack([times, tx]), np.column_stack([np.full(X.shape[0], T), X])])
    rank_located = econ.rank_region.sample(samples, seed)

    # Lipschitz continuity: random pairs plus short coordinate steps.
    partner = X[rng.permutation(X.shape[0])]
    step = 1e-3 * (econ.region.hi - econ.region.lo)
    nudged = econ.region.clip(X + step * rng.choice([-1.0, 1.0], size=X.shape))

    def lipschitz_check() -> AssumptionCheck:
        lb = max(_lipschitz(d.drift_at, X, partner), _lipschitz(d.drift_at, X, nudged))
        ls = max(_lipschitz(d.dispersion_at, X, partner), _lipschitz(d.dispersion_at, X, nudged))
        return AssumptionCheck(
            assumption="A1-lipschitz", verdict="PASS",
            witnesses={"lipschitz_b": lb, "lipschitz_sigma": ls},
            message="max sampled difference quotient",
        )
    checks.append(_guarded("A1-lipschitz", lipschitz_check, d.dispersion_at, X))

    def ellipticity_check() -> AssumptionCheck:
        eig = np.linalg.eigvalsh(d.diffusion_at(X))
        j = int(np.argmin(eig[:, 0]))
        min_eig = float(eig[j, 0])
        return AssumptionCheck(
            assumption="A1-ellipticity",
            verdict="PASS" if min_eig > ELLIPTICITY_FLOOR else "FAIL",
            witnesses={"min_eigenvalue": min_eig},
            message="minimum eigenvalue of a(x) = sigma sigma^T over samples",
            location=X[j].tolist(),
        )
    checks.append(_guarded("A1-ellipticity", ellipticity_check, d.dispersion_at, X))

    def coefficient_check() -> AssumptionCheck:
        derivs = [b.diff(v) for b in d.drift for v in el.state_variables(K)]
        derivs += [s.diff(v) for row in d.sigma for s in row for v in el.state_variables(K)]
        max_dcoef = max(float(np.max(np.abs(f(0.0, X)))) for f in derivs)
        return AssumptionCheck(
            assumption="A2-bounded-coefficients", verdict="PASS",
            witnesses={
                "max_abs_b": float(np.max(np.abs(d.drift_at(X)))),
                "max_abs_sigma": float(np.max(np.abs(d.dispersion_at(X)))),
                "max_abs_coefficient_derivative": max_dcoef,
            },
            message="bounds on the region; Hoelder continuity only via sampled quotients",
        )
    checks.append(_guarded("A2-bounded-coefficients", coefficient_check, d.drift_at, X))

    checks.append(AssumptionCheck(
        assumption="A3-utility", verdict="PASS",
        witnesses={"min_gamma": min(a.utility.gamma for a in econ.agents)},
        message="CRRA with gamma > 0 is strictly increasing, strictly concave and satisfies Inada",
        region_relative=False,
    ))

    def entitlement_check() -> AssumptionCheck:
        values = np.array([a.entitlement(times, tx) for a in econ.agents])
        i, j = np.unravel_index(int(np.argmin(values)), values.shape)
        lo = float(values[i, j])
        return AssumptionCheck(
            assumption="A4-entitlements", verdict="PASS" if lo > 0.0 else "FAIL",
            witnesses={"min_entitlement": lo},
            message=f"agent {i} attains the minimum",
            location=[float(times[j])] + tx[j].tolist(),
        )
    checks.append(_guarded("A4-entitlements", entitlement_check,
                           lambda P: [a.entitlement(P[:, 0], P[:, 1:]) for a in econ.agents], located))

    def dividend_check() -> AssumptionCheck:
        flows = np.array([a.dividend(times, tx) for a in econ.assets])
        terminals = np.array([a.terminal(T, X) for a in econ.assets])
        lo = float(min(flows.min(), terminals.min()))
        return AssumptionCheck(
            assumption="A5-dividends", verdict="PASS" if lo >= 0.0 else "FAIL",
            witnesses={"min_flow_dividend": float(flows.min()), "min_terminal_dividend": float(terminals.min())},
            message="dividends nonnegative; asset 0 pays only at T",
        )
    checks.append(_guarded("A5-dividends", dividend_check,
                           lambda P: [(a.dividend(P[:, 0], P[:, 1:]), a.terminal(T, P[:, 1:])) for a in econ.assets],
                           located))

    def aggregate_check() -> AssumptionCheck:
        ef = flow(times, tx)
        eT = lump(T, X)
        lo, hi = float(min(ef.min(), eT.min())), float(max(ef.max(), eT.max()))
        return AssumptionCheck(
            assumption="A6ii-aggregate-bounds",
            verdict="PASS" if lo > 0.0 and np.isfinite(hi) else "FAIL",
            witnesses={"min_aggregate": lo, "max_aggregate": hi},
            message="bounded and bounded away from zero on the verification region only",
        )
    checks.append(_guarded("A6ii-aggregate-bounds", aggregate_check,
                           lambda P: (flow(P[:, 0], P[:, 1:]), lump(T, P[:, 1:])), located))

    def felicity_check() -> AssumptionCheck:
        worst = 0.0
        lo = np.inf
        for i, agent in enumerate(econ.agents):
            f_i, l_i = individual_endowment(econ, i)
            eps_flow, eps_lump = f_i(times, tx), l_i(T, X)
            lo = min(lo, float(eps_flow.min()), float(eps_lump.min()))
            if lo <= 0.0:
                break
            worst = max(worst, float(np.max(agent.utility.marginal(times, eps_flow))),
                        float(np.max(agent.utility.marginal(T, eps_lump))))
        return AssumptionCheck(
            assumption="A6i-marginal-felicity",
            verdict="PASS" if lo > 0.0 and np.isfinite(worst) else "FAIL",
            witnesses={"min_individual_endowment": float(lo), "max_marginal_felicity": worst},
            message="marginal utility of each individual endowment bounded on the region",
        )
    checks.append(_guarded("A6i-marginal-felicity", felicity_check, _felicity_evaluator(econ), located))

    def rank_check() -> AssumptionCheck:
        min_det, where, n = min_abs_jacobian_det(econ, samples, seed)
        g0_min = float(np.min(econ.assets[0].terminal(T, econ.rank_region.sample(samples, seed))))
        return AssumptionCheck(
            assumption="A7-terminal-rank",
            verdict="PASS" if min_det > RANK_FLOOR else "FAIL",
            witnesses={"min_abs_det_Dh": min_det, "min_bond_payoff": g0_min},
            message=f"symbolic Jacobian of g^k(T)/g^0(T) over {n} samples of V",
            location=where.tolist(),
        )
    checks.append(_guarded("A7-terminal-rank", rank_check,
                           lambda P: [f(T, P) for row in payoff_ratio_jacobian(econ) for f in row], rank_located))

    checks.append(AssumptionCheck(
        assumption="analyticity", verdict="UNVERIFIABLE",
        message="entitlements, dividends and coefficients are smooth DSL expressions; analyticity is not certified",
        region_relative=False,
    ))

    caveats = ["assumptions are verified on the declared compact region, not on all of R^K"]
    if exit_paths > 0:
        from radner.core.markov import exit_fraction, simulate_paths
        bundle = simulate_paths(d, T, steps=max(16, int(np.ceil(50 * T))), n_paths=exit_paths, seed=seed)
        fraction = exit_fraction(bundle, econ.region)
        if fraction > 0.01:
            logger.warning(f"{fraction:.2%} of simulated paths leave the verification region before T")
            caveats.append(f"truncation: {fraction:.2%} of paths exit the verification region before T")

    report = ValidationReport(checks=checks, samples=int(X.shape[0]), seed=seed, caveats=caveats)
    for c in checks:
        log = logger.info if c.verdict != "FAIL" else logger.warning
        log(f"[{c.assumption}] {c.verdict} {c.witnesses}")
    return report
