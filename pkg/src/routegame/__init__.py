"""Routing-market games: user-side equilibria, preference calibration,
rival-market abstraction, and leader-side price optimization.

The numerical core (round-robin best-response sweeps) runs as a compiled
extension when available and falls back to pure numpy; see
``routegame.kernels.BACKEND`` for which one is active.
"""

from .market import (
    Market,
    ObservedDay,
    PreferenceParams,
    Provider,
    SynthRanges,
    UserGroup,
    build_market,
    load_market,
    load_performance_csv,
    load_usage_csv,
    save_market,
    synth_market,
)
from .equilibrium import (
    EquilibriumResult,
    FlowMatrix,
    best_response,
    marginal_cost,
    potential,
    solve_equilibrium,
    user_cost,
    wardrop_gap,
)
from .sensitivity import EquilibriumJacobian, ParamRef, equilibrium_jacobian, loss_gradient
from .calibration import CalibrationReport, FitOptions, fit_theta, init_biases, predict_flows
from .abstraction import (
    AbstractedMarket,
    RivalScores,
    ScorerModel,
    TrainOptions,
    aggregate,
    curve_loss,
    heuristic_scores,
    rival_features,
    score_rivals,
    train_scorer,
)
from .pricing import (
    PricingResult,
    optimize_price_abstracted,
    optimize_price_exact,
    optimize_price_sweep,
    profit,
    profit_curve,
)

__version__ = "0.1.0"
