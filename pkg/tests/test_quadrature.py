import math

import numpy as np
import pytest

from thermobound.quadrature import SQRT, UNIFORM, TimeGrid, mean_and_stderr, trapezoid, warp


@pytest.mark.parametrize("spacing", [UNIFORM, SQRT])
def test_weights_reproduce_trapezoid(spacing):
    grid = TimeGrid(33, spacing=spacing)
    f = np.cos(3 * grid.nodes)
    assert np.dot(grid.weights, f) == pytest.approx(np.trapezoid(f, grid.nodes), rel=1e-14)
    assert grid.nodes[0] == grid.t_min and grid.nodes[-1] == grid.t_max
    assert np.all(np.diff(grid.nodes) > 0)


def test_sqrt_spacing_handles_inverse_sqrt_singularity():
    exact = 2 * (math.sqrt(1 - 1e-4) - math.sqrt(1e-4))
    errs = {}
    for spacing in (SQRT, UNIFORM):
        grid = TimeGrid(64, spacing=spacing)
        errs[spacing] = abs(trapezoid(grid.weights, grid.nodes ** -0.5)[0] - exact)
    assert errs[SQRT] < 0.02 and errs[SQRT] < 0.05 * errs[UNIFORM]


def test_trapezoid_error_propagation():
    w = np.array([0.5, 1.0, 0.5])
    total, err = trapezoid(w, np.array([1.0, 2.0, 3.0]), np.array([0.1, 0.2, 0.1]))
    assert total == pytest.approx(4.0)
    assert err == pytest.approx(math.sqrt(0.25 * 0.01 + 0.04 + 0.25 * 0.01))


def test_refined_grid_contains_old_nodes():
    g = TimeGrid(9)
    fine = g.refined()
    assert fine.n == 17
    np.testing.assert_allclose(fine.nodes[::2], g.nodes, rtol=1e-13)


def test_warp_endpoints_pinned():
    t = warp(np.array([0.0, 1.0]), 1e-4, 1 - 1e-4, SQRT)
    assert t[0] == 1e-4 and t[1] == 1 - 1e-4


def test_mean_and_stderr():
    m, e = mean_and_stderr(np.array([1.0, 2.0, 3.0, 4.0]))
    assert m == 2.5 and e == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)
    with pytest.raises(ValueError):
        mean_and_stderr(np.array([]))


def test_invalid_grids():
    with pytest.raises(ValueError):
        TimeGrid(1)
    with pytest.raises(ValueError):
        TimeGrid(8, t_min=0.5, t_max=0.4)
    with pytest.raises(ValueError):
        TimeGrid(8, spacing="log")
