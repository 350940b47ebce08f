import numpy as np
import pytest

import routegame as rg
from routegame import _br_py, kernels
from routegame.kernels import water_fill

try:
    from routegame import _br_cy
except ImportError:
    _br_cy = None


def _brute_force_water_fill(costs, inv2g, demand, step=1e-4):
    """Exhaustive grid over the 2-route split; oracle for the closed form."""
    grid = np.arange(0.0, demand + step, step)
    best, best_val = None, np.inf
    g = 1.0 / (2.0 * inv2g)
    for v in grid:
        x = np.array([v, demand - v])
        val = float(costs @ x + g @ x**2)
        if val < best_val:
            best, best_val = x, val
    return best


def test_water_fill_matches_grid_oracle():
    costs = np.array([1.0, 2.0])
    inv2g = np.array([0.5, 0.5])  # alpha=1, w_q=1
    exact = water_fill(costs, inv2g, 10.0)
    assert np.allclose(exact, [5.25, 4.75])
    oracle = _brute_force_water_fill(costs, inv2g, 10.0)
    assert np.abs(exact - oracle).max() < 1e-3


def test_water_fill_zero_demand():
    assert np.all(water_fill(np.array([1.0, 2.0]), np.array([0.5, 0.5]), 0.0) == 0.0)


def test_water_fill_excludes_expensive_route():
    costs = np.array([1.0, 1.0, 100.0])
    inv2g = np.full(3, 0.5)
    x = water_fill(costs, inv2g, 10.0)
    assert x[2] == 0.0
    assert np.allclose(x[:2], [5.0, 5.0])


@pytest.mark.skipif(_br_cy is None, reason="compiled kernel not built")
def test_compiled_and_python_kernels_agree():
    rng = np.random.default_rng(2)
    for trial in range(20):
        n, m = int(rng.integers(1, 12)), int(rng.integers(2, 12))
        base = rng.uniform(-2.0, 5.0, (n, m))
        alpha = rng.uniform(0.5, 10.0, m)
        demands = rng.uniform(0.0, 20.0, n)
        w_q = float(rng.uniform(0.2, 3.0))
        flow_a = np.repeat(demands[:, None], m, axis=1) / m
        flow_b = flow_a.copy()
        load_a, load_b = flow_a.sum(axis=0), flow_b.sum(axis=0)
        _br_cy.best_response_rounds(flow_a, load_a, base, alpha, w_q, demands, 5)
        _br_py.best_response_rounds(flow_b, load_b, base, alpha, w_q, demands, 5)
        assert np.abs(flow_a - flow_b).max() < 1e-10
        assert np.abs(load_a - load_b).max() < 1e-10


def test_backend_reports_name():
    assert kernels.BACKEND in ("cython", "python")


def test_solver_results_match_across_backends(monkeypatch):
    if _br_cy is None:
        pytest.skip("compiled kernel not built")
    market = rg.synth_market(77, 5, 6)
    res_compiled = rg.solve_equilibrium(market)
    monkeypatch.setattr(kernels, "best_response_rounds", _br_py.best_response_rounds)
    res_python = rg.solve_equilibrium(market)
    assert np.abs(res_compiled.flow.values - res_python.flow.values).max() < 1e-9
