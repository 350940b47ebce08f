import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import routegame as rg
from routegame import equilibrium as eq
from routegame.errors import ConvergenceError, DegeneracyError, ShapeError

from conftest import make_market


def brute_force_two_route(market, i=0, step=1e-4):
    """Grid minimizer of user i's cost over f_i1 in [0, D]; the independent oracle."""
    D = market.demands[i]
    f1 = np.arange(0.0, D + step, step)
    best, best_cost = None, np.inf
    flow = np.zeros((market.n_users, 2))
    for v in f1:
        flow[i] = (v, D - v)
        c = rg.user_cost(i, flow, market)
        if c < best_cost:
            best, best_cost = v, c
    return np.array([best, D - best])


class TestUserCost:
    def test_single_route_arithmetic(self):
        market = make_market([1.0], [10.0], [10.0])
        cost = rg.user_cost(0, np.array([[10.0]]), market)
        assert cost == pytest.approx(20.0)  # Q = 1, 10 * (1 + 1)

    def test_zero_demand_zero_cost(self):
        market = make_market([1.0, 2.0], [1.0, 1.0], [0.0])
        assert rg.user_cost(0, np.zeros((1, 2)), market) == 0.0

    def test_direct_summation_oracle(self, two_provider_market):
        flow = np.array([[5.25, 4.75]])
        # independent summation: sum_j f_j * (p_j + Q_j)
        q = flow.sum(axis=0) / two_provider_market.capacities
        expected = float(sum(flow[0, j] * (two_provider_market.prices[j] + q[j]) for j in range(2)))
        assert expected == pytest.approx(64.875)
        assert rg.user_cost(0, flow, two_provider_market) == pytest.approx(expected)

    def test_shape_mismatch(self, two_provider_market):
        with pytest.raises(ShapeError):
            rg.user_cost(0, np.zeros((1, 3)), two_provider_market)


class TestPotential:
    def test_zero_flow(self, two_provider_market):
        assert rg.potential(np.zeros((1, 2)), two_provider_market) == 0.0

    def test_two_users_single_provider_congestion_term(self):
        market = make_market([0.0], [1.0], [1.0, 1.0])
        flow = np.ones((2, 1))
        assert rg.potential(flow, market) == pytest.approx(3.0)  # (1/2)(4 + 1 + 1)

    def test_single_user_gradient_matches_cost_gradient(self, two_provider_market):
        flow = np.array([[6.0, 4.0]])
        h = 1e-6
        for j in range(2):
            up, dn = flow.copy(), flow.copy()
            up[0, j] += h
            dn[0, j] -= h
            d_phi = (rg.potential(up, two_provider_market) - rg.potential(dn, two_provider_market)) / (2 * h)
            d_cost = (rg.user_cost(0, up, two_provider_market) - rg.user_cost(0, dn, two_provider_market)) / (2 * h)
            assert d_phi == pytest.approx(d_cost, rel=1e-6)


class TestMarginalCost:
    def test_empty_network(self):
        market = make_market([2.0, 3.0], [1.0, 1.0], [1.0],
                             delays=[[0.5, 0.1]], biases=[1.0, 0.0])
        flow = np.zeros((1, 2))
        assert rg.marginal_cost(0, 0, flow, market) == pytest.approx(2.0 + 0.5 - 1.0)
        assert rg.marginal_cost(0, 1, flow, market) == pytest.approx(3.0 + 0.1)

    def test_matches_finite_difference_of_potential(self):
        rng = np.random.default_rng(5)
        market = rg.synth_market(19, 3, 4)
        for _ in range(100):
            raw = rng.uniform(0.1, 1.0, (3, 4))
            flow = raw / raw.sum(axis=1, keepdims=True) * market.demands[:, None]
            h = 1e-6
            i, j = rng.integers(0, 3), rng.integers(0, 4)
            up, dn = flow.copy(), flow.copy()
            up[i, j] += h
            dn[i, j] -= h
            fd = (rg.potential(up, market) - rg.potential(dn, market)) / (2 * h)
            assert rg.marginal_cost(i, j, flow, market) == pytest.approx(fd, rel=1e-6)

    def test_direct_arithmetic(self):
        market = make_market([2.0], [10.0], [20.0], delays=[[0.5]], biases=[1.0])
        flow = np.array([[5.0]])
        # others' load 15 is impossible with one user; emulate via two users
        market = make_market([2.0], [10.0], [5.0, 15.0], delays=[[0.5], [0.0]], biases=[1.0])
        flow = np.array([[5.0], [15.0]])
        assert rg.marginal_cost(0, 0, flow, market) == pytest.approx(2 + 0.5 - 1 + 25.0 / 10.0)


class TestBestResponse:
    def test_identical_providers_split_equally(self):
        market = make_market([1.0, 1.0], [2.0, 2.0], [7.0])
        br = rg.best_response(0, np.zeros((1, 2)), market)
        assert np.allclose(br, [3.5, 3.5])

    def test_hand_instance_against_grid_oracle(self, two_provider_market):
        br = rg.best_response(0, np.zeros((1, 2)), two_provider_market)
        assert np.allclose(br, [5.25, 4.75], atol=1e-12)
        oracle = brute_force_two_route(two_provider_market)
        assert np.abs(br - oracle).max() < 1e-3

    def test_expensive_provider_priced_out(self):
        market = make_market([1.0, 1.0, 100.0], [1.0, 1.0, 1.0], [10.0], price_cap=500.0)
        br = rg.best_response(0, np.zeros((1, 3)), market)
        assert br[2] == 0.0
        assert np.allclose(br[:2], [5.0, 5.0])
        # brute-force 2-D grid oracle over (f0, f1), f2 the remainder
        best, best_cost = None, np.inf
        for f0 in np.arange(0, 10.0001, 0.01):
            for f1 in np.arange(0, 10.0001 - f0, 0.01):
                flow = np.array([[f0, f1, 10.0 - f0 - f1]])
                c = rg.user_cost(0, flow, market)
                if c < best_cost:
                    best, best_cost = flow[0].copy(), c
        assert np.abs(br - best).max() < 0.02

    def test_degenerate_wq_rejected(self):
        market = make_market([1.0, 2.0], [1.0, 1.0], [1.0], w_q=0.0)
        with pytest.raises(DegeneracyError):
            rg.best_response(0, np.zeros((1, 2)), market)

    @given(st.integers(min_value=0, max_value=10_000))
    @settings(max_examples=40, deadline=None)
    def test_best_response_beats_random_feasible_points(self, seed):
        rng = np.random.default_rng(seed)
        market = rg.synth_market(int(rng.integers(0, 1000)), 2, 3)
        raw = rng.uniform(0.0, 1.0, (2, 3)) + 1e-9
        flow = raw / raw.sum(axis=1, keepdims=True) * market.demands[:, None]
        br = rg.best_response(0, flow, market)
        cand = flow.copy()
        cand[0] = br
        br_cost = rg.user_cost(0, cand, market)
        for _ in range(5):
            raw = rng.uniform(0.0, 1.0, 3) + 1e-9
            cand[0] = raw / raw.sum() * market.demands[0]
            assert br_cost <= rg.user_cost(0, cand, market) + 1e-9


class TestSolveEquilibrium:
    def test_single_provider_forced_allocation(self):
        market = make_market([1.0], [5.0], [3.0, 4.0])
        res = rg.solve_equilibrium(market)
        assert np.allclose(res.flow.values, [[3.0], [4.0]])
        assert res.congestion[0] == pytest.approx(7.0 / 5.0)

    def test_hand_instance_through_solver(self, two_provider_market):
        res = rg.solve_equilibrium(two_provider_market)
        assert np.allclose(res.flow.values, [[5.25, 4.75]], atol=1e-9)
        assert res.wardrop_gap <= 1e-8
        assert res.kkt_residual <= 1e-8
        # multipliers: common marginal cost 1 + 2 * 5.25 = 11.5
        assert res.user_multipliers[0] == pytest.approx(11.5)

    def test_symmetric_market_symmetric_flows(self):
        market = make_market([1.0, 1.0], [2.0, 2.0], [6.0, 6.0])
        res = rg.solve_equilibrium(market)
        assert np.allclose(res.flow.values, [[3.0, 3.0], [3.0, 3.0]], atol=1e-9)

    def test_feasibility_exact(self):
        market = rg.synth_market(3, 6, 7)
        res = rg.solve_equilibrium(market)
        vals = res.flow.values
        assert (vals >= 0).all()
        assert np.abs(vals.sum(axis=1) - market.demands).max() < 1e-9 * market.demands.max()

    def test_zero_demand_user_keeps_row(self):
        market = make_market([1.0, 2.0], [1.0, 1.0], [5.0, 0.0])
        res = rg.solve_equilibrium(market)
        assert res.flow.values.shape == (2, 2)
        assert np.all(res.flow.values[1] == 0.0)
        assert res.user_multipliers[1] == 0.0

    def test_potential_descent_is_monotone(self):
        market = rg.synth_market(23, 5, 6)
        res = rg.solve_equilibrium(market, record_potential=True)
        trace = res.potential_trace
        assert np.all(np.diff(trace) <= 1e-9 * np.abs(trace[:-1]).max())

    def test_uniqueness_from_random_starts(self):
        market = rg.synth_market(29, 4, 5)
        rng = np.random.default_rng(0)
        flows = []
        for _ in range(10):
            raw = rng.uniform(0.0, 1.0, (4, 5)) + 1e-12
            start = raw / raw.sum(axis=1, keepdims=True) * market.demands[:, None]
            flows.append(rg.solve_equilibrium(market, start=start).flow.values)
        for f in flows[1:]:
            assert np.abs(f - flows[0]).max() < 1e-6

    def test_non_convergence_raises_with_gap(self):
        market = rg.synth_market(31, 6, 6)
        with pytest.raises(ConvergenceError) as info:
            rg.solve_equilibrium(market, max_rounds=1, tol=1e-300)
        assert info.value.gap is not None

    def test_best_response_application_never_increases_potential(self):
        rng = np.random.default_rng(17)
        market = rg.synth_market(37, 4, 4)
        raw = rng.uniform(0.0, 1.0, (4, 4)) + 1e-9
        flow = raw / raw.sum(axis=1, keepdims=True) * market.demands[:, None]
        phi = rg.potential(flow, market)
        for _ in range(3):
            for i in range(4):
                flow[i] = rg.best_response(i, flow, market)
                new_phi = rg.potential(flow, market)
                assert new_phi <= phi + 1e-9 * max(1.0, abs(phi))
                phi = new_phi


class TestResultRecord:
    def test_serializes_to_plain_json(self, two_provider_market):
        import json

        res = rg.solve_equilibrium(two_provider_market)
        record = json.loads(json.dumps(res.to_dict()))
        assert record["flow"] == res.flow.values.tolist()
        assert set(record) >= {"flow", "user_multipliers", "potential",
                               "wardrop_gap", "kkt_residual", "iterations", "congestion"}

    def test_concurrent_solves_share_market_safely(self):
        from concurrent.futures import ThreadPoolExecutor

        market = rg.synth_market(301, 6, 7)
        with ThreadPoolExecutor(max_workers=4) as pool:
            results = list(pool.map(lambda _: rg.solve_equilibrium(market), range(8)))
        base = results[0].flow.values
        for res in results[1:]:
            assert np.array_equal(res.flow.values, base)


class TestWardropGap:
    def test_equilibrium_certifies(self, two_provider_market):
        res = rg.solve_equilibrium(two_provider_market)
        assert rg.wardrop_gap(res.flow, two_provider_market) <= 1e-8

    def test_misallocated_flow_gap_is_19(self, two_provider_market):
        gap = rg.wardrop_gap(np.array([[10.0, 0.0]]), two_provider_market)
        assert gap == pytest.approx(19.0)  # (1 + 20) - 2

    def test_zero_demand_market(self):
        market = make_market([1.0, 2.0], [1.0, 1.0], [0.0])
        assert rg.wardrop_gap(np.zeros((1, 2)), market) == 0.0
