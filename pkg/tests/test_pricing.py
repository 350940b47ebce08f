import numpy as np
import pytest

import routegame as rg
from routegame.abstraction import ScorerModel
from routegame.errors import ScaleError, ValidationError
from routegame.pricing import (
    dense_grid_profit,
    optimize_price_abstracted,
    optimize_price_exact,
    optimize_price_sweep,
    profit,
    profit_curve,
)

from conftest import make_market


@pytest.fixture
def interior_family():
    """Rival at price 2, target last; analytic profit p * (5.5 - p/4), max at p=11."""
    return make_market([2.0, 1.0], [1.0, 1.0], [10.0], price_cap=20.0)


class TestProfit:
    def test_monopoly_is_linear_with_full_load(self):
        market = make_market([1.0], [5.0], [3.0, 4.0], price_cap=8.0)
        for p in (0.0, 2.0, 8.0):
            value, load = profit(p, market)
            assert load == pytest.approx(7.0)
            assert value == pytest.approx(p * 7.0)

    def test_zero_price_zero_profit(self):
        market = rg.synth_market(5, 2, 4)
        value, load = profit(0.0, market)
        assert value == 0.0
        assert load > 0

    def test_interior_family_matches_closed_form(self, interior_family):
        for p in (1.0, 1.5, 2.0, 5.0):
            value, load = profit(p, interior_family)
            assert load == pytest.approx(5.5 - p / 4.0, abs=1e-9)
            assert value == pytest.approx(p * (5.5 - p / 4.0), abs=1e-8)

    def test_out_of_range_price_rejected(self, interior_family):
        with pytest.raises(ValidationError):
            profit(25.0, interior_family)


class TestProfitCurve:
    def test_monopoly_curve_linear(self):
        market = make_market([1.0], [5.0], [3.0], price_cap=4.0)
        curve = profit_curve(market, np.linspace(0, 4, 9))
        assert np.allclose(curve[:, 1], curve[:, 0] * 3.0)

    def test_duplicate_points_identical(self, interior_family):
        curve = profit_curve(interior_family, [1.0, 1.0, 2.0])
        assert curve[0, 1] == curve[1, 1]

    def test_closed_form_on_interior_piece(self, interior_family):
        grid = np.linspace(1.0, 2.0, 11)
        curve = profit_curve(interior_family, grid)
        assert np.abs(curve[:, 1] - grid * (5.25 - (grid - 1.0) / 4.0)).max() < 1e-6

    def test_unsorted_grid_rejected(self, interior_family):
        with pytest.raises(ValidationError):
            profit_curve(interior_family, [2.0, 1.0])


class TestSweep:
    def test_monopoly_boundary_exact(self):
        market = make_market([1.0], [5.0], [3.0, 4.0], price_cap=8.0)
        res = optimize_price_sweep(market)
        assert res.best_price == 8.0  # exact boundary, no refinement drift

    def test_interior_family_maximizer(self, interior_family):
        res = optimize_price_sweep(interior_family)
        assert res.best_price == pytest.approx(11.0, abs=interior_family.price_cap * 1e-4)
        assert res.best_profit == pytest.approx(30.25, rel=1e-6)

    def test_agrees_with_dense_grid_oracle(self, interior_family):
        res = optimize_price_sweep(interior_family)
        grid_best = dense_grid_profit(interior_family)[1]
        assert res.best_profit >= grid_best - 1e-6

    def test_more_coarse_points_never_hurt(self):
        for seed in range(8):
            market = rg.synth_market(400 + seed, 2, 3)
            lo = optimize_price_sweep(market, coarse_points=16)
            hi = optimize_price_sweep(market, coarse_points=32)
            tol = market.price_cap * 1e-4 * max(market.demands.sum(), 1.0)
            assert hi.best_profit >= lo.best_profit - tol

    def test_reported_profit_is_attained(self):
        market = rg.synth_market(411, 3, 4)
        res = optimize_price_sweep(market)
        again, _ = profit(res.best_price, market)
        assert again == pytest.approx(res.best_profit, rel=1e-8)

    def test_curve_attached_and_consistent(self, interior_family):
        res = optimize_price_sweep(interior_family)
        assert res.curve.shape[1] == 3
        assert res.best_profit >= res.curve[:, 1].max() - 1e-12

    def test_too_few_points_rejected(self, interior_family):
        with pytest.raises(ValidationError):
            optimize_price_sweep(interior_family, coarse_points=4)


class TestExact:
    def test_monopoly(self):
        market = make_market([1.0], [5.0], [3.0, 4.0], price_cap=8.0)
        res = optimize_price_exact(market)
        assert res.best_price == pytest.approx(8.0)
        assert res.method == "exact_piecewise"

    def test_interior_family_closed_form(self, interior_family):
        res = optimize_price_exact(interior_family)
        assert res.best_price == pytest.approx(11.0, abs=1e-9)
        assert res.best_profit == pytest.approx(30.25, rel=1e-9)

    def test_scale_bound_enforced(self):
        market = rg.synth_market(1, 4, 4)
        with pytest.raises(ScaleError):
            optimize_price_exact(market)

    def test_matches_sweep_on_random_markets(self):
        for seed in range(15):
            market = rg.synth_market(500 + seed, 2, 3)
            exact = optimize_price_exact(market)
            sweep = optimize_price_sweep(market)
            tol = market.price_cap * 1e-4
            assert sweep.best_profit <= exact.best_profit * (1 + 1e-9) + 1e-12
            assert abs(sweep.best_profit - exact.best_profit) <= max(
                1e-3 * exact.best_profit, tol
            )

    def test_profit_zero_at_price_zero_everywhere(self):
        for seed in range(5):
            market = rg.synth_market(600 + seed, 2, 3)
            assert profit(0.0, market)[0] == 0.0

    def test_curve_continuity_on_fine_grid(self):
        market = rg.synth_market(601, 2, 3)
        grid = np.linspace(0, market.price_cap, 201)
        curve = profit_curve(market, grid)
        jumps = np.abs(np.diff(curve[:, 1]))
        # Lipschitz estimate from neighbor medians; kinks allowed, jumps not
        scale = np.median(jumps) + 1e-9
        assert jumps.max() < 50 * scale + 1e-6


class TestAbstractedPipeline:
    def test_identity_abstraction_matches_direct(self):
        market = rg.synth_market(700, 2, 4)
        scorer = ScorerModel.initialize(0)
        direct = optimize_price_sweep(market)
        piped = optimize_price_abstracted(market, scorer, market.n_rivals)
        tol = market.price_cap * 1e-3
        assert abs(piped.best_price - direct.best_price) <= max(tol, 1e-6 * direct.best_price + tol)
        assert piped.best_profit == pytest.approx(direct.best_profit, rel=1e-4)

    def test_oracle_ratio_at_most_one(self):
        for seed in range(5):
            market = rg.synth_market(710 + seed, 2, 3)
            res = optimize_price_abstracted(market, ScorerModel.initialize(0), 1,
                                            compute_oracle=True)
            assert res.oracle_ratio is not None
            assert res.oracle_ratio <= 1.0 + 1e-9

    def test_reports_true_profit_in_original_market(self):
        market = rg.synth_market(720, 2, 5)
        res = optimize_price_abstracted(market, ScorerModel.initialize(0), 2)
        value, _ = profit(res.best_price, market)
        assert value == pytest.approx(res.best_profit, rel=1e-10)
        assert res.abstracted_curve is not None
