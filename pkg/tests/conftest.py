import copy
import json

import numpy as np
import pytest

from radner.core import exprlang as el
from radner.core.economy import Box, DiffusionSpec, load_economy
from radner.core.markov import build_grid
from radner.core.registry import EconomyRegistry
from radner.models import QuadratureConfig


def make_diffusion(b, sigma, x0=None) -> DiffusionSpec:
    K = len(b)
    return DiffusionSpec(
        K=K,
        drift=tuple(el.parse(s, K) for s in b),
        sigma=tuple(tuple(el.parse(s, K) for s in row) for row in sigma),
        x0=np.zeros(K) if x0 is None else np.asarray(x0, dtype=float),
    )


@pytest.fixture(scope="session")
def registry():
    return EconomyRegistry().load()


@pytest.fixture
def catalog_document(registry):
    """Deep copy of a catalog document, safe to edit in a test."""
    def _document(name: str):
        return copy.deepcopy(registry.get(name))
    return _document


@pytest.fixture
def economy(catalog_document):
    def _economy(name: str, **overrides):
        doc = catalog_document(name)
        doc.update(overrides)
        return load_economy(doc)
    return _economy


@pytest.fixture
def brownian():
    return make_diffusion(["0"], [["1"]])


@pytest.fixture
def small_grid():
    """[-8, 8] with 161 nodes and 80 time steps over [0, 1]."""
    return build_grid(Box.from_bounds([-8.0], [8.0]), [161], 1.0, 80, x0=[0.0])


@pytest.fixture
def plane_grid():
    """[-4, 4]^2 with 41 x 41 nodes and 20 time steps over [0, 1]."""
    return build_grid(Box.from_bounds([-4.0, -4.0], [4.0, 4.0]), [41, 41], 1.0, 20, x0=[0.0, 0.0])


@pytest.fixture
def quadrature():
    return QuadratureConfig(n_paths=2000, steps=40, seed=7)


@pytest.fixture
def run_config(tmp_path):
    """Writes a small run configuration and returns its path."""
    def _write(economy: str = "log1", **extra):
        config = {
            "economy": economy,
            "grid": {"nodes": [121], "time_steps": 60},
            "mc": {"paths": 4000, "steps": 40, "seed": 11},
            "validation_samples": 256,
        }
        config.update(extra)
        path = tmp_path / "run.json"
        path.write_text(json.dumps(config), encoding="utf-8")
        return path
    return _write
