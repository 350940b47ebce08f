import numpy as np
import pytest
from scipy.optimize import linprog

from routegame.lp import simplex_solve


def test_small_known_lp():
    # min -x - y  s.t.  x + y + s = 4, x + 3y + t = 6
    c = np.array([-1.0, -1.0, 0.0, 0.0])
    A = np.array([[1.0, 1.0, 1.0, 0.0], [1.0, 3.0, 0.0, 1.0]])
    b = np.array([4.0, 6.0])
    res = simplex_solve(c, A, b)
    assert res.status == "optimal"
    assert res.objective == pytest.approx(-4.0)


def test_infeasible_detected():
    A = np.array([[1.0, 1.0], [1.0, 1.0]])
    b = np.array([1.0, 2.0])
    res = simplex_solve(np.ones(2), A, b)
    assert res.status == "infeasible"


def test_unbounded_detected():
    # min -x s.t. x - y = 1: x can grow without bound
    res = simplex_solve(np.array([-1.0, 0.0]), np.array([[1.0, -1.0]]), np.array([1.0]))
    assert res.status == "unbounded"


def test_redundant_constraints_handled():
    A = np.array([[1.0, 1.0], [2.0, 2.0]])
    b = np.array([2.0, 4.0])
    res = simplex_solve(np.array([1.0, 2.0]), A, b)
    assert res.status == "optimal"
    assert res.objective == pytest.approx(2.0)


def test_degenerate_vertices_no_cycling():
    # multiple constraints meeting at the optimum; Bland's rule must terminate
    A = np.array([
        [1.0, 1.0, 1.0, 0.0, 0.0],
        [1.0, 0.0, 0.0, 1.0, 0.0],
        [0.0, 1.0, 0.0, 0.0, 1.0],
    ])
    b = np.array([1.0, 1.0, 1.0])
    res = simplex_solve(np.array([-1.0, -1.0, 0.0, 0.0, 0.0]), A, b)
    assert res.status == "optimal"
    assert res.objective == pytest.approx(-1.0)


@pytest.mark.parametrize("seed", range(30))
def test_random_lps_match_scipy(seed):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 9))
    nv = int(rng.integers(k, k + 9))
    A = rng.normal(size=(k, nv))
    b = A @ rng.uniform(0.0, 2.0, nv)  # feasible by construction
    c = rng.normal(size=nv)
    ours = simplex_solve(c, A, b)
    ref = linprog(c, A_eq=A, b_eq=b, bounds=(0, None), method="highs")
    if ours.status == "unbounded":
        assert ref.status == 3
    else:
        assert ours.status == "optimal" and ref.status == 0
        assert ours.objective == pytest.approx(ref.fun, rel=1e-7, abs=1e-8)
        assert np.abs(A @ ours.x - b).max() < 1e-8
        assert ours.x.min() >= -1e-10
