import numpy as np
import pandas as pd
import pytest

from conftest import make_diffusion
from radner.core.economy import Box
from radner.core.markov import apply_generator, build_grid, exit_fraction, export_paths_csv, generator_matrix, \
    simulate_paths
from radner.exceptions import SimulationError

# ============= Grids =============

def test_grid_layout_and_x0_snapping():
    g = build_grid(Box.from_bounds([-1.0, 0.0], [1.0, 2.0]), [5, 3], 2.0, 4, x0=[0.4, 1.2])
    assert g.shape == (5, 3)
    assert g.points.shape == (5, 3, 2)
    np.testing.assert_allclose(g.spacing, [0.5, 1.0])
    assert g.dt == pytest.approx(0.5)
    assert g.x0_index == (3, 1)
    np.testing.assert_allclose(g.x0_offset, [-0.1, 0.2])
    assert g.interior_mask.sum() == 3


@pytest.mark.parametrize("nodes, steps, T", [([2], 10, 1.0), ([11], 0, 1.0), ([11], 10, 0.0)])
def test_grid_rejects_bad_resolution(nodes, steps, T):
    with pytest.raises(ValueError):
        build_grid(Box.from_bounds([0.0], [1.0]), nodes, T, steps)


def test_grid_rejects_x0_outside_box():
    with pytest.raises(ValueError, match="outside"):
        build_grid(Box.from_bounds([0.0], [1.0]), [11], 1.0, 10, x0=[2.0])


def test_interpolation_is_exact_for_multilinear_fields(small_grid):
    values = 2.0 * small_grid.times[:, None] + small_grid.axes[0][None, :]
    X = np.array([[0.13], [-2.71], [9.0]])
    np.testing.assert_allclose(small_grid.interpolate(values, 0.4, X), [0.93, -1.91, 8.8])

# ============= Generator =============

def test_generator_is_exact_on_quadratics():
    g = build_grid(Box.from_bounds([-2.0], [3.0]), [21], 1.0, 1)
    d = make_diffusion(["1"], [["1"]])
    x = g.axes[0]
    np.testing.assert_allclose(apply_generator(d, x ** 2, g), 2 * x + 1, atol=1e-10)
    np.testing.assert_allclose(apply_generator(d, x, g), np.ones_like(x), atol=1e-12)
    np.testing.assert_allclose(apply_generator(d, np.ones_like(x), g), 0.0, atol=1e-12)


def test_generator_cross_term():
    g = build_grid(Box.from_bounds([-1.0, -1.0], [1.0, 1.0]), [9, 7], 1.0, 1)
    d = make_diffusion(["0", "0"], [["1", "0"], ["0.5", "1"]])
    u = g.points[..., 0] * g.points[..., 1]
    # a = sigma sigma^T has a_12 = 0.5, and only the mixed derivative of x1 x2 survives
    np.testing.assert_allclose(apply_generator(d, u, g), 0.5, atol=1e-12)
    assert generator_matrix(d, g).shape == (63, 63)


def test_generator_ignores_constants_and_scales_linearly(small_grid):
    d = make_diffusion(["-0.5*x1"], [["1 + 0.1*sin(x1)"]])
    u = np.sin(small_grid.axes[0])
    np.testing.assert_allclose(apply_generator(d, 2.5 * u + 3.0, small_grid),
                               2.5 * apply_generator(d, u, small_grid), rtol=1e-10, atol=1e-10)


def test_spatial_gradient_has_derivative_axis_last(small_grid):
    values = np.broadcast_to(small_grid.axes[0] ** 2, (3, small_grid.times.size, 161))
    grad = small_grid.spatial_gradient(values)
    assert grad.shape == (3, small_grid.times.size, 161, 1)
    np.testing.assert_allclose(grad[1, 0, :, 0], 2 * small_grid.axes[0], atol=1e-10)

# ============= Simulation =============

def test_deterministic_drift_lands_exactly():
    d = make_diffusion(["1"], [["0"]])
    bundle = simulate_paths(d, 1.0, steps=8, n_paths=5, seed=0)
    np.testing.assert_array_equal(bundle.states[:, -1, 0], 1.0)
    np.testing.assert_allclose(bundle.times, np.linspace(0, 1, 9))


def test_paths_are_reproducible(brownian):
    a = simulate_paths(brownian, 1.0, steps=20, n_paths=300, seed=42, chunk=128)
    b = simulate_paths(brownian, 1.0, steps=20, n_paths=300, seed=42, chunk=128)
    c = simulate_paths(brownian, 1.0, steps=20, n_paths=300, seed=43, chunk=128)
    np.testing.assert_array_equal(a.states, b.states)
    assert not np.array_equal(a.states, c.states)


def test_single_step_is_one_gaussian_move(brownian):
    bundle = simulate_paths(brownian, 2.0, steps=1, n_paths=10, seed=1, x0=[0.5])
    assert bundle.states.shape == (10, 2, 1)
    assert bundle.increments.shape == (10, 1, 1)
    np.testing.assert_allclose(bundle.states[:, 1], 0.5 + bundle.increments[:, 0])


def test_brownian_terminal_mean(brownian):
    bundle = simulate_paths(brownian, 1.0, steps=4, n_paths=20000, seed=2)
    assert abs(bundle.states[:, -1, 0].mean()) <= 4.0 / np.sqrt(20000)
    assert bundle.states[:, -1, 0].std() == pytest.approx(1.0, rel=0.05)


def test_domain_failure_reports_path_and_step():
    d = make_diffusion(["0"], [["sqrt(x1)"]], x0=[0.05])
    with pytest.raises(SimulationError) as info:
        simulate_paths(d, 1.0, steps=50, n_paths=200, seed=3)
    assert 0 <= info.value.path < 200
    assert info.value.step >= 1


def test_exit_fraction_and_csv_export(brownian, tmp_path):
    bundle = simulate_paths(brownian, 1.0, steps=10, n_paths=50, seed=4)
    assert exit_fraction(bundle, Box.from_bounds([-100.0], [100.0])) == 0.0
    assert exit_fraction(bundle, Box.from_bounds([1e-9], [2e-9])) == 1.0
    frame = pd.read_csv(export_paths_csv(bundle, tmp_path / "paths.csv"))
    assert list(frame.columns) == ["path", "time", "x1"]
    assert len(frame) == 50 * 11
    np.testing.assert_allclose(frame["x1"].to_numpy(), bundle.states[:, :, 0].ravel())
