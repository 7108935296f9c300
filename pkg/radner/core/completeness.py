"""
Dynamic completeness diagnostics: change of numeraire to asset 0 and the
volatility matrix diag(1/r) Dr sigma of normalised prices on the grid.

Verdicts are grid-relative. A node counts as degenerate when the
Hadamard-scaled determinant |det M| / prod_k |row_k(M)| falls below the
threshold. A row whose norm is at or below sqrt(eps) max(1, |sigma|) counts
as vanishing and gives a scaled determinant of 0.
"""
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from radner.config import settings
from radner.core.economy import RANK_FLOOR, Box, DiffusionSpec, Economy, min_abs_jacobian_det
from radner.core.pricing import PricingSolution
from radner.exceptions import NumeraireError, SingularVolatilityError
from radner.models import CompletenessReport, TerminalRankResult, WitnessNode
from radner.utils.logger import logger

MAX_WITNESSES = 20
ROW_FLOOR = float(np.sqrt(np.finfo(float).eps))


@dataclass(frozen=True, eq=False)
class NormalizedPrices:
    r: np.ndarray       # (K, M+1, *shape), r^k = s^k / s^0 for k = 1..K
    Dr: np.ndarray      # (K, M+1, *shape, K)
    quotient_rule_gap: float


def normalize_prices(p: PricingSolution, region: Optional[Box] = None) -> NormalizedPrices:
    """
    r = s / s0 and its grid gradient. The quotient-rule gap compares Dr with
    (Ds - r Ds0) / s0 on interior nodes inside ``region`` (all interior nodes
    when it is omitted), relative to max(1, max |Dr|) there.
    """
    s0 = p.s[0]
    if np.any(s0 <= 0.0):
        n, *idx = np.unravel_index(int(np.argmin(s0)), s0.shape)
        raise NumeraireError("cannot change numeraire: s0 is not strictly positive",
                             t=float(p.grid.times[n]), x=p.grid.points[tuple(idx)].tolist())
    r = p.s[1:] / s0
    Dr = p.grid.spatial_gradient(r)
    by_quotient = (p.ds_dx[1:] - r[..., None] * p.ds_dx[0][None]) / s0[None, ..., None]
    inner = p.grid.interior_mask
    if region is not None and np.any(inner & region.contains(p.grid.points)):
        inner = inner & region.contains(p.grid.points)
    gap = np.abs(Dr - by_quotient)[:, :, inner]
    scale = max(1.0, float(np.max(np.abs(Dr[:, :, inner])))) if gap.size else 1.0
    return NormalizedPrices(r=r, Dr=Dr, quotient_rule_gap=float(gap.max() / scale) if gap.size else 0.0)


def volatility_matrices(r: np.ndarray, Dr: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Batched diag(1/r) Dr sigma; ``r`` is (..., K), ``Dr`` and ``sigma`` are (..., K, K)."""
    return (Dr / r[..., :, None]) @ sigma


def volatility_matrix(d: DiffusionSpec, r: Sequence[float], Dr: np.ndarray, t: float, x: Sequence[float]) -> np.ndarray:
    """diag(1/r_k) Dr(t, x) sigma(x) at one point."""
    r = np.asarray(r, dtype=float)
    if np.any(r == 0.0):
        raise SingularVolatilityError("normalised price vanishes, volatility matrix undefined",
                                      t=t, x=list(x), r=r.tolist())
    sigma = d.dispersion_at(np.asarray(x, dtype=float)[None, :])[0]
    return volatility_matrices(r, np.asarray(Dr, dtype=float), sigma)


def row_floor(sigma: np.ndarray) -> np.ndarray:
    """Absolute row-norm floor sqrt(eps) max(1, |sigma|_F) per node."""
    return ROW_FLOOR * np.maximum(1.0, np.linalg.norm(sigma, axis=(-2, -1)))


def scaled_det(M: np.ndarray, floor=ROW_FLOOR) -> np.ndarray:
    """|det M| / prod of row norms, 0 where some row norm is at or below ``floor``."""
    norms = np.linalg.norm(M, axis=-1)
    vanishing = np.any(~(norms > np.asarray(floor)[..., None]), axis=-1)
    det = np.abs(np.linalg.det(M))
    denom = np.prod(np.where(vanishing[..., None], 1.0, norms), axis=-1)
    return np.where(vanishing, 0.0, det / denom)


def determinant_field(econ: Economy, p: PricingSolution,
                      normalized: Optional[NormalizedPrices] = None) -> Tuple[np.ndarray, np.ndarray]:
    """(|det|, scaled det) of the volatility matrix at every node, shape (M+1, *shape)."""
    nz = normalize_prices(p, econ.rank_region) if normalized is None else normalized
    sigma = econ.diffusion.dispersion_at(p.grid.points)
    r = np.moveaxis(nz.r, 0, -1)                 # (M+1, *shape, K)
    Dr = np.moveaxis(nz.Dr, 0, -2)               # (M+1, *shape, K, K)
    vol = volatility_matrices(r, Dr, sigma[None])
    return np.abs(np.linalg.det(vol)), scaled_det(vol, row_floor(sigma)[None])


def terminal_rank_check(econ: Economy, samples: Optional[int] = None, seed: Optional[int] = None) -> TerminalRankResult:
    samples = settings.validation_samples if samples is None else samples
    seed = settings.seed if seed is None else seed
    min_det, where, n = min_abs_jacobian_det(econ, samples, seed)
    return TerminalRankResult(min_abs_det=min_det, location=where.tolist(), samples=n, passed=min_det > RANK_FLOOR)


def _quantiles(values: np.ndarray) -> dict:
    out = {}
    for label, q in (("p50", 50), ("p90", 90), ("p99", 99), ("max", 100)):
        v = float(np.percentile(values, q))
        out[label] = v if np.isfinite(v) else None
    return out


def completeness_report(econ: Economy, p: PricingSolution, threshold: Optional[float] = None,
                        normalized: Optional[NormalizedPrices] = None,
                        fields: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                        samples: Optional[int] = None, seed: Optional[int] = None) -> CompletenessReport:
    """
    Determinant diagnostics over every interior node and time node, plus the
    terminal rank check on the rank region.
    """
    threshold = settings.det_threshold if threshold is None else threshold
    g = p.grid
    nz = normalize_prices(p, econ.rank_region) if normalized is None else normalized
    abs_det, scaled = determinant_field(econ, p, nz) if fields is None else fields

    inner = g.interior_mask
    det_in, scaled_in = abs_det[:, inner], scaled[:, inner]
    nodes = g.points[inner]
    flagged = scaled_in < threshold

    n, j = np.unravel_index(int(np.argmin(scaled_in)), scaled_in.shape)
    worst = WitnessNode(t=float(g.times[n]), x=nodes[j].tolist(), scaled_det=float(scaled_in[n, j]))

    witnesses = []
    if np.any(flagged):
        order = np.argsort(np.where(flagged, scaled_in, np.inf), axis=None)[:MAX_WITNESSES]
        for flat in order:
            tn, xj = np.unravel_index(int(flat), scaled_in.shape)
            if not flagged[tn, xj]:
                break
            witnesses.append(WitnessNode(t=float(g.times[tn]), x=nodes[xj].tolist(), scaled_det=float(scaled_in[tn, xj])))

    sigma = econ.diffusion.dispersion_at(nodes)
    vol = volatility_matrices(np.moveaxis(nz.r[:, :, inner], 0, -1), np.moveaxis(nz.Dr[:, :, inner], 0, -2), sigma[None])
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(vol)
    cond = np.where(np.isfinite(cond), cond, np.inf)

    terminal = terminal_rank_check(econ, samples, seed)
    fraction = float(np.mean(flagged))
    complete = fraction == 0.0 and terminal.passed
    report = CompletenessReport(
        verdict="COMPLETE-ON-GRID" if complete else "INCOMPLETE-ON-GRID",
        threshold=float(threshold) if np.isfinite(threshold) else float(np.finfo(float).max),
        nodes_checked=int(scaled_in.size),
        min_abs_det=float(det_in.min()),
        min_location=worst,
        fraction_below=fraction,
        condition_quantiles=_quantiles(cond),
        terminal_rank=terminal,
        witnesses=witnesses,
        quotient_rule_gap=nz.quotient_rule_gap,
    )
    log = logger.info if complete else logger.warning
    log(f"Completeness: {report.verdict}, min scaled det {worst.scaled_det:.3e}, "
        f"{fraction:.2%} of {report.nodes_checked} nodes below {threshold:g}")
    return report
