"""User-side equilibrium: potential minimization by exact best-response sweeps.

Each user's subproblem is a diagonal QP over her demand simplex with a
closed-form water-filling solution, so round-robin best response is exact
block-coordinate descent on the potential

    Phi(F) = sum_ij (w_p p_j + w_d d_ij - b_j) f_ij
           + sum_j  (w_q / 2 alpha_j) ((sum_i f_ij)^2 + sum_i f_ij^2)

whose unique minimizer over the feasible set is the equilibrium. Convergence
is certified by the Wardrop gap: on every used route a user's marginal cost
must equal her minimum marginal cost.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConvergenceError, DegeneracyError, ShapeError

EQ_TOL = 1e-8          # default certificate tolerance
MAX_ROUNDS = 10_000
USED_ROUTE_REL = 1e-9  # f_ij > USED_ROUTE_REL * D_i counts as a used route


@dataclass(frozen=True)
class FlowMatrix:
    """Nonnegative n x m allocation of user demand to providers."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2:
            raise ShapeError(f"flow matrix must be 2-D, got shape {vals.shape}")
        if (vals < 0).any():
            raise ShapeError("flow matrix entries must be nonnegative")
        vals = vals.copy()
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class EquilibriumResult:
    flow: FlowMatrix
    user_multipliers: np.ndarray   # common marginal cost per user on used routes
    potential: float
    wardrop_gap: float
    kkt_residual: float
    iterations: int
    congestion: np.ndarray         # load_j / alpha_j
    potential_trace: np.ndarray | None = None

    def to_dict(self):
        return {
            "flow": self.flow.values.tolist(),
            "user_multipliers": self.user_multipliers.tolist(),
            "potential": self.potential,
            "wardrop_gap": self.wardrop_gap,
            "kkt_residual": self.kkt_residual,
            "iterations": self.iterations,
            "congestion": self.congestion.tolist(),
        }


def _flow_values(flow, market):
    vals = flow.values if isinstance(flow, FlowMatrix) else np.asarray(flow, dtype=float)
    if vals.shape != (market.n_users, market.n_providers):
        raise ShapeError(
            f"flow shape {vals.shape} does not match market "
            f"({market.n_users} users, {market.n_providers} providers)"
        )
    return vals


def congestion_factors(flow, market):
    vals = _flow_values(flow, market)
    return vals.sum(axis=0) / market.capacities


def user_cost(i, flow, market):
    """Total routing cost of user i under the full profile."""
    vals = _flow_values(flow, market)
    q = vals.sum(axis=0) / market.capacities
    per_token = market.base_costs[i] + market.params.w_q * q
    return float(vals[i] @ per_token)


def potential(flow, market):
    vals = _flow_values(flow, market)
    loads = vals.sum(axis=0)
    fixed = float((market.base_costs * vals).sum())
    congestion = float(
        (market.params.w_q / (2.0 * market.capacities) * (loads**2 + (vals**2).sum(axis=0))).sum()
    )
    return fixed + congestion


def marginal_cost_matrix(flow, market):
    """M_ij = base_ij + (w_q/alpha_j)(load_j + f_ij), the gradient of the potential."""
    vals = _flow_values(flow, market)
    loads = vals.sum(axis=0)
    return market.base_costs + (market.params.w_q / market.capacities) * (loads[None, :] + vals)


def marginal_cost(i, j, flow, market):
    return float(marginal_cost_matrix(flow, market)[i, j])


def best_response(i, flow, market):
    """Exact minimizer of user i's cost over her simplex, others held fixed."""
    if market.params.w_q <= 0:
        raise DegeneracyError("best response needs w_q > 0 for strict convexity")
    vals = _flow_values(flow, market)
    others = vals.sum(axis=0) - vals[i]
    costs = market.base_costs[i] + market.params.w_q / market.capacities * others
    inv2g = market.capacities / (2.0 * market.params.w_q)
    return kernels.water_fill(costs, inv2g, float(market.demands[i]))


def wardrop_gap(flow, market):
    """max_i [max over used routes of M_ij - min_j M_ij]; 0 for zero-demand users."""
    vals = _flow_values(flow, market)
    marg = marginal_cost_matrix(vals, market)
    gap = 0.0
    for i in range(market.n_users):
        d = market.demands[i]
        if d <= 0:
            continue
        used = vals[i] > USED_ROUTE_REL * d
        if used.any():
            gap = max(gap, float(marg[i][used].max() - marg[i].min()))
    return gap


def _certificate(vals, market):
    """(gap, kkt_residual, multipliers) for a candidate flow.

    The KKT residual aggregates primal feasibility (relative row-sum error),
    nonnegativity, and complementary slackness scaled by demand shares, with
    multipliers estimated as each user's minimum marginal cost.
    """
    marg = marginal_cost_matrix(vals, market)
    demands = market.demands
    n = market.n_users
    lam = np.zeros(n)
    gap = 0.0
    residual = 0.0
    for i in range(n):
        d = demands[i]
        row = vals[i]
        if d <= 0:
            residual = max(residual, float(abs(row.sum())))
            continue
        mmin = float(marg[i].min())
        used = row > USED_ROUTE_REL * d
        if used.any():
            gap = max(gap, float(marg[i][used].max()) - mmin)
        lam[i] = float(row @ marg[i]) / d
        feas = abs(row.sum() - d) / max(1.0, d)
        comp = float(((row / d) * (marg[i] - mmin)).max())
        residual = max(residual, feas, comp)
    residual = max(residual, float(max(0.0, -vals.min(initial=0.0))))
    return gap, residual, lam


def solve_equilibrium(
    market,
    tol=EQ_TOL,
    max_rounds=MAX_ROUNDS,
    start=None,
    record_potential=False,
):
    """Round-robin best response to the unique equilibrium flow.

    Stops when both the Wardrop gap and the KKT residual fall below ``tol``;
    raises ConvergenceError (carrying the last gap) past ``max_rounds``.
    """
    if market.params.w_q <= 0:
        raise DegeneracyError("equilibrium solve needs w_q > 0")
    if (market.capacities <= 0).any():
        raise DegeneracyError("equilibrium solve needs all capacities > 0")

    n, m = market.n_users, market.n_providers
    demands = np.ascontiguousarray(market.demands)
    base = np.ascontiguousarray(market.base_costs)
    alpha = np.ascontiguousarray(market.capacities)

    if start is None:
        flow = np.repeat(demands[:, None], m, axis=1) / m
    else:
        flow = _flow_values(start, market).copy()
        sums = flow.sum(axis=1)
        for i in range(n):
            if demands[i] <= 0:
                flow[i] = 0.0
            elif sums[i] > 0:
                flow[i] *= demands[i] / sums[i]
            else:
                flow[i] = demands[i] / m
    flow = np.ascontiguousarray(flow)
    load = flow.sum(axis=0)

    trace = [] if record_potential else None
    gap = np.inf
    rounds = 0
    while rounds < max_rounds:
        kernels.best_response_rounds(flow, load, base, alpha, market.params.w_q, demands, 1)
        rounds += 1
        load[:] = flow.sum(axis=0)  # drop incremental-update drift each round
        if record_potential:
            trace.append(potential(flow, market))
        gap, residual, lam = _certificate(flow, market)
        if gap <= tol and residual <= tol:
            q = load / alpha
            return EquilibriumResult(
                flow=FlowMatrix(np.maximum(flow, 0.0)),
                user_multipliers=lam,
                potential=potential(flow, market),
                wardrop_gap=gap,
                kkt_residual=residual,
                iterations=rounds,
                congestion=q,
                potential_trace=np.asarray(trace) if record_potential else None,
            )
    raise ConvergenceError(
        f"no equilibrium certificate after {max_rounds} rounds (gap {gap:.3e})", gap=gap
    )
