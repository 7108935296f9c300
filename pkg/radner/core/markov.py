"""
State diffusion: Euler-Maruyama paths, space-time grids and the generator

    (L u)(x) = b(x) . grad u(x) + 1/2 tr(a(x) D^2 u(x)),   a = sigma sigma^T

discretised with central differences in the interior and second-order
one-sided differences on the box faces.
"""
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator
from tqdm import tqdm

from radner.config import settings
from radner.core.economy import Box, DiffusionSpec
from radner.exceptions import ExprDomainError, SimulationError
from radner.utils.logger import logger


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform tensor grid over a box times uniform time nodes 0 = t_0 < ... < t_M = T."""

    axes: Tuple[np.ndarray, ...]
    times: np.ndarray
    x0_index: Optional[Tuple[int, ...]] = None
    x0_offset: Optional[np.ndarray] = None

    @property
    def K(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(len(a) for a in self.axes)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacing(self) -> np.ndarray:
        return np.array([a[1] - a[0] for a in self.axes])

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def box(self) -> Box:
        return Box.from_bounds([a[0] for a in self.axes], [a[-1] for a in self.axes])

    @cached_property
    def points(self) -> np.ndarray:
        """Node coordinates with shape ``(*shape, K)``."""
        return np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1)

    @property
    def flat_points(self) -> np.ndarray:
        return self.points.reshape(-1, self.K)

    @cached_property
    def interior_mask(self) -> np.ndarray:
        mask = np.ones(self.shape, dtype=bool)
        for d in range(self.K):
            index = [slice(None)] * self.K
            index[d] = 0
            mask[tuple(index)] = False
            index[d] = -1
            mask[tuple(index)] = False
        return mask

    def spatial_gradient(self, values: np.ndarray) -> np.ndarray:
        """
        Central-difference gradient over the trailing K axes (second-order
        one-sided on faces); the derivative index goes last.
        """
        lead = values.ndim - self.K
        grads = np.gradient(values, *self.axes, axis=tuple(range(lead, values.ndim)), edge_order=2)
        if self.K == 1:
            grads = [grads]
        return np.stack(grads, axis=-1)

    def interpolator(self, values: np.ndarray) -> RegularGridInterpolator:
        """Multilinear interpolant in (t, x) of a grid function of shape ``(M+1, *shape)``."""
        return RegularGridInterpolator((self.times, *self.axes), values, method="linear",
                                       bounds_error=False, fill_value=None)

    def interpolate(self, values: np.ndarray, t: Union[float, np.ndarray], X: np.ndarray) -> np.ndarray:
        """Interpolate at states ``X`` (clamped to the box) and time(s) ``t``."""
        X = self.box.clip(np.asarray(X, dtype=float))
        t = np.clip(np.broadcast_to(np.asarray(t, dtype=float), X.shape[:-1]), self.times[0], self.times[-1])
        query = np.concatenate([t[..., None], X], axis=-1)
        return self.interpolator(values)(query)

    def value_at_x0(self, values: np.ndarray) -> np.ndarray:
        """Values at the node nearest to x0 (last K axes are spatial)."""
        if self.x0_index is None:
            raise ValueError("grid was built without an initial state")
        return values[(Ellipsis, *self.x0_index)]


@dataclass(frozen=True, eq=False)
class PathBundle:
    times: np.ndarray
    states: np.ndarray          # (n_paths, steps + 1, K)
    increments: np.ndarray      # (n_paths, steps, K), the Brownian increments dW
    seed: int

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def steps(self) -> int:
        return self.times.shape[0] - 1

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

# ============= Simulation =============

def _locate(d: DiffusionSpec, X: np.ndarray) -> int:
    for j, x in enumerate(X):
        try:
            d.drift_at(x[None, :])
            d.dispersion_at(x[None, :])
        except ExprDomainError:
            return j
        if not np.all(np.isfinite(x)):
            return j
    return 0


def simulate_paths(d: DiffusionSpec, T: float, steps: int, n_paths: int, seed: int,
                   x0: Optional[Sequence[float]] = None, t0: float = 0.0,
                   chunk: Optional[int] = None) -> PathBundle:
    """
    Euler-Maruyama on [t0, T]:

        X_{m+1} = X_m + b(X_m) dt + sigma(X_m) sqrt(dt) xi_m.

    Paths are drawn in chunks; chunk c uses the c-th child of SeedSequence(seed),
    so the bundle is bit-identical for identical arguments.
    """
    if steps < 1 or n_paths < 1:
        raise ValueError("steps and n_paths must be at least 1")
    if T <= t0:
        raise ValueError(f"horizon {T} must exceed the start time {t0}")

    K = d.K
    chunk = chunk or settings.path_chunk
    times = np.linspace(t0, T, steps + 1)
    dt = (T - t0) / steps
    sqrt_dt = np.sqrt(dt)
    start = np.asarray(d.x0 if x0 is None else x0, dtype=float).reshape(K)

    states = np.empty((n_paths, steps + 1, K))
    increments = np.empty((n_paths, steps, K))
    n_chunks = -(-n_paths // chunk)
    children = np.random.SeedSequence(seed).spawn(n_chunks)

    for c in tqdm(range(n_chunks), desc="paths", disable=not settings.show_progress or n_chunks == 1):
        lo, hi = c * chunk, min((c + 1) * chunk, n_paths)
        rng = np.random.default_rng(children[c])
        dW = sqrt_dt * rng.standard_normal((hi - lo, steps, K))
        X = np.tile(start, (hi - lo, 1))
        states[lo:hi, 0] = X
        for m in range(steps):
            try:
                drift = d.drift_at(X)
                disp = d.dispersion_at(X)
            except ExprDomainError as e:
                raise SimulationError(f"coefficient evaluation failed: {e.message}",
                                      path=lo + _locate(d, X), step=m) from e
            X = X + drift * dt + np.einsum("pij,pj->pi", disp, dW[:, m])
            if not np.all(np.isfinite(X)):
                bad = int(np.argmax(~np.all(np.isfinite(X), axis=-1)))
                raise SimulationError("state became non-finite", path=lo + bad, step=m + 1)
            states[lo:hi, m + 1] = X
        increments[lo:hi] = dW

    return PathBundle(times=times, states=states, increments=increments, seed=seed)


def exit_fraction(bundle: PathBundle, box: Box) -> float:
    """Fraction of paths that leave ``box`` at some time node."""
    inside = box.contains(bundle.states)
    return float(np.mean(~np.all(inside, axis=1)))


def export_paths_csv(bundle: PathBundle, path: Union[str, Path]) -> Path:
    n, m1, K = bundle.states.shape
    frame = pd.DataFrame({
        "path": np.repeat(np.arange(n), m1),
        "time": np.tile(bundle.times, n),
        **{f"x{k + 1}": bundle.states[:, :, k].ravel() for k in range(K)},
    })
    path = Path(path)
    frame.to_csv(path, index=False)
    return path

# ============= Grids =============

def build_grid(region: Box, nodes_per_dim: Sequence[int], T: float, time_steps: int,
               x0: Optional[Sequence[float]] = None) -> Grid:
    nodes = [int(n) for n in nodes_per_dim]
    if len(nodes) != region.K:
        raise ValueError(f"need one node count per dimension ({region.K}), got {len(nodes)}")
    if any(n < 3 for n in nodes):
        raise ValueError("every dimension needs at least 3 nodes")
    if time_steps < 1:
        raise ValueError("time_steps must be at least 1")
    if np.any(region.hi <= region.lo):
        raise ValueError("grid region is degenerate")
    if T <= 0:
        raise ValueError("horizon must be positive")

    axes = tuple(np.linspace(l, h, n) for l, h, n in zip(region.lo, region.hi, nodes))
    times = np.linspace(0.0, T, time_steps + 1)

    x0_index = x0_offset = None
    if x0 is not None:
        x0 = np.asarray(x0, dtype=float)
        if not region.contains(x0):
            raise ValueError(f"initial state {x0.tolist()} lies outside the grid box")
        x0_index = tuple(int(np.argmin(np.abs(a - v))) for a, v in zip(axes, x0))
        x0_offset = x0 - np.array([a[i] for a, i in zip(axes, x0_index)])
        if np.any(np.abs(x0_offset) > 0):
            logger.debug(f"x0 snapped to grid node {x0_index}, offset {x0_offset.tolist()}")

    return Grid(axes=axes, times=times, x0_index=x0_index, x0_offset=x0_offset)

# ============= Generator =============

def _first_derivative(n: int, h: float) -> sp.csr_matrix:
    D = sp.lil_matrix((n, n))
    for i in range(1, n - 1):
        D[i, i - 1], D[i, i + 1] = -0.5 / h, 0.5 / h
    D[0, 0], D[0, 1], D[0, 2] = -1.5 / h, 2.0 / h, -0.5 / h
    D[n - 1, n - 3], D[n - 1, n - 2], D[n - 1, n - 1] = 0.5 / h, -2.0 / h, 1.5 / h
    return D.tocsr()


def _second_derivative(n: int, h: float) -> sp.csr_matrix:
    D = sp.lil_matrix((n, n))
    h2 = h * h
    for i in range(1, n - 1):
        D[i, i - 1], D[i, i], D[i, i + 1] = 1.0 / h2, -2.0 / h2, 1.0 / h2
    if n >= 4:
        for j, w in enumerate((2.0, -5.0, 4.0, -1.0)):
            D[0, j] = w / h2
            D[n - 1, n - 1 - j] = w / h2
    else:
        for j, w in enumerate((1.0, -2.0, 1.0)):
            D[0, j] = w / h2
            D[n - 1, n - 1 - j] = w / h2
    return D.tocsr()


def _along(op: sp.spmatrix, axis: int, shape: Tuple[int, ...]) -> sp.csr_matrix:
    """Lift a 1-D operator to act along ``axis`` of a C-ordered tensor grid."""
    mats = [op if d == axis else sp.identity(n, format="csr") for d, n in enumerate(shape)]
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return out.tocsr()


def derivative_operators(g: Grid) -> Tuple[List[sp.csr_matrix], List[sp.csr_matrix]]:
    shape, h = g.shape, g.spacing
    first = [_along(_first_derivative(n, h[d]), d, shape) for d, n in enumerate(shape)]
    second = [_along(_second_derivative(n, h[d]), d, shape) for d, n in enumerate(shape)]
    return first, second


def generator_matrix(d: DiffusionSpec, g: Grid) -> sp.csr_matrix:
    """Sparse N x N matrix of L on the flattened (C-ordered) spatial grid."""
    X = g.flat_points
    b = d.drift_at(X)
    a = d.diffusion_at(X)
    first, second = derivative_operators(g)
    L = sp.csr_matrix((g.n_nodes, g.n_nodes))
    for i in range(g.K):
        L = L + sp.diags(b[:, i]) @ first[i] + sp.diags(0.5 * a[:, i, i]) @ second[i]
        for j in range(i + 1, g.K):
            L = L + sp.diags(a[:, i, j]) @ (first[i] @ first[j])
    return L.tocsr()


def apply_generator(d: DiffusionSpec, u: np.ndarray, g: Grid,
                    L: Optional[sp.spmatrix] = None) -> np.ndarray:
    L = generator_matrix(d, g) if L is None else L
    return (L @ np.asarray(u, dtype=float).ravel()).reshape(g.shape)
