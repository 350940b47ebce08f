"""Preference recovery from observed routing flows.

Two stages: a linear program finds the smallest nonnegative per-provider
biases under which each observed day is consistent with equilibrium at unit
weights (equal marginal costs on used routes, no cheaper unused route); then
projected gradient descent on the squared flow-matching loss refines the
weights and biases jointly, differentiating through the equilibrium map.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .equilibrium import USED_ROUTE_REL, solve_equilibrium
from .errors import ConvergenceError, NumericalError, ValidationError
from .lp import simplex_solve
from .market import PreferenceParams
from .sensitivity import loss_gradient, theta_param_refs

SLACK_PENALTY = 1e3


@dataclass(frozen=True)
class BiasInit:
    """LP output: biases plus the per-(user, day) equilibrium marginal costs."""

    biases: np.ndarray
    multipliers: dict
    total_slack: float
    objective: float


@dataclass(frozen=True)
class CalibrationReport:
    theta: PreferenceParams
    loss_trace: np.ndarray
    r2: float
    mae: float
    converged: bool
    wall_time: float
    iterations: int = 0

    def to_dict(self):
        return {
            "theta": {
                "w_p": self.theta.w_p,
                "w_q": self.theta.w_q,
                "w_d": self.theta.w_d,
                "biases": list(self.theta.biases),
            },
            "loss_trace": [float(v) for v in self.loss_trace],
            "r2": self.r2,
            "mae": self.mae,
            "converged": self.converged,
            "iterations": self.iterations,
        }


@dataclass(frozen=True)
class FitOptions:
    max_iters: int = 500
    step_init: float = 1e-2
    armijo_c: float = 1e-4
    max_backtracks: int = 40
    rel_tol: float = 1e-8
    abs_tol: float = 1e-16   # geometric convergence never trips rel_tol; stop here
    patience: int = 5
    eq_tol: float = 1e-10
    w_q_floor: float = 1e-6


def _check_days(days):
    if not days:
        raise ValidationError("need at least one observed day")
    shape = days[0].flows.shape
    for d in days:
        if d.flows.shape != shape:
            raise ValidationError("observed days disagree on market shape")
    return shape


def observable_marginals(day):
    """p_j + d_ij + (load_j + f_ij)/alpha_j at unit weights, from observed flows."""
    loads = day.flows.sum(axis=0)
    return day.prices[None, :] + day.delays + (loads[None, :] + day.flows) / day.capacities[None, :]


def init_biases(days, slack_penalty=SLACK_PENALTY):
    """Smallest nonnegative biases making the observed days equilibrium-consistent.

    Constraints are pooled across days with a separate multiplier per
    (user, day): used routes pin the marginal cost to the multiplier, unused
    routes may only exceed it. If the pooled system is infeasible, equality
    constraints get penalized slacks and the total slack is reported.
    """
    n, m = _check_days(days)

    rows = []  # (i, t, j, used, mprime)
    pairs = []  # (i, t) with positive demand
    for t, day in enumerate(days):
        mprime = observable_marginals(day)
        for i in range(n):
            if day.demands[i] <= 0:
                continue
            pairs.append((i, t))
            thresh = USED_ROUTE_REL * day.demands[i]
            for j in range(m):
                rows.append((i, t, j, day.flows[i, j] > thresh, mprime[i, j]))
    if not pairs:
        raise ValidationError("no user carries demand on any provided day")
    pair_pos = {p: k for k, p in enumerate(pairs)}

    def assemble(with_slack):
        # variables: b (m) | lambda+ (P) | lambda- (P) | surplus (per unused) | slack+/- (per used)
        n_pairs = len(pairs)
        n_unused = sum(1 for r in rows if not r[3])
        n_used = len(rows) - n_unused
        nv = m + 2 * n_pairs + n_unused + (2 * n_used if with_slack else 0)
        A = np.zeros((len(rows), nv))
        b_rhs = np.zeros(len(rows))
        cost = np.zeros(nv)
        cost[:m] = 1.0
        s_off = m + 2 * n_pairs
        k_off = s_off + n_unused
        if with_slack:
            cost[k_off:] = slack_penalty
        u_idx = 0
        s_idx = 0
        for r, (i, t, j, used, mp) in enumerate(rows):
            p = pair_pos[(i, t)]
            A[r, j] = -1.0
            A[r, m + p] = -1.0
            A[r, m + n_pairs + p] = 1.0
            b_rhs[r] = -mp
            if used:
                if with_slack:
                    A[r, k_off + 2 * s_idx] = 1.0
                    A[r, k_off + 2 * s_idx + 1] = -1.0
                s_idx += 1
            else:
                A[r, s_off + u_idx] = -1.0
                u_idx += 1
        return cost, A, b_rhs, k_off

    cost, A, b_rhs, k_off = assemble(with_slack=False)
    res = simplex_solve(cost, A, b_rhs)
    total_slack = 0.0
    if res.status == "infeasible":
        cost, A, b_rhs, k_off = assemble(with_slack=True)
        res = simplex_solve(cost, A, b_rhs)
        if res.status != "optimal":
            raise NumericalError(f"bias LP relaxation ended {res.status}")
        total_slack = float(res.x[k_off:].sum())
    elif res.status != "optimal":
        raise NumericalError(f"bias LP ended {res.status}; objective is bounded below by 0")

    biases = res.x[:m].copy()
    n_pairs = len(pairs)
    lam = res.x[m : m + n_pairs] - res.x[m + n_pairs : m + 2 * n_pairs]
    multipliers = {p: float(lam[k]) for k, p in enumerate(pairs)}
    return BiasInit(
        biases=biases,
        multipliers=multipliers,
        total_slack=total_slack,
        objective=float(biases.sum()),
    )


def predict_flows(theta, day, eq_tol=1e-10):
    """Equilibrium flows on a day's objective snapshot under the given preferences."""
    market = day.to_market(theta)
    return solve_equilibrium(market, tol=eq_tol).flow


def _project(vec, w_q_floor):
    out = np.maximum(vec, 0.0)
    out[0] = max(out[0], w_q_floor)
    return out


def fit_theta(days, init, opts=None):
    """Projected gradient descent on the summed squared flow-matching error.

    Each iteration solves every day's equilibrium, backpropagates the residual
    through the KKT system, and takes an Armijo backtracking step (halving
    from ``step_init``), projecting w_q above its floor and w_d, b_j to be
    nonnegative. w_p stays fixed at 1.
    """
    opts = opts or FitOptions()
    n, m = _check_days(days)
    if init.w_q <= 0:
        raise ValidationError("initial w_q must be positive")
    refs = theta_param_refs(m)

    def evaluate(vec, want_grad):
        theta = PreferenceParams.from_vector(vec)
        loss = 0.0
        grad = np.zeros_like(vec) if want_grad else None
        for day in days:
            market = day.to_market(theta)
            try:
                result = solve_equilibrium(market, tol=opts.eq_tol)
            except ConvergenceError as exc:
                raise ConvergenceError(f"day {day.date}: {exc}", gap=exc.gap) from None
            resid = result.flow.values - day.flows
            loss += float((resid**2).sum())
            if want_grad:
                grad += loss_gradient(2.0 * resid, result, market, refs).values
        if not np.isfinite(loss):
            raise NumericalError("flow-matching loss is not finite")
        return loss, grad

    vec = _project(init.as_vector(), opts.w_q_floor)
    t0 = time.perf_counter()
    loss, grad = evaluate(vec, want_grad=True)
    trace = [loss]
    converged = loss <= opts.abs_tol
    iters = 0
    while not converged and iters < opts.max_iters:
        iters += 1
        step = opts.step_init
        accepted = False
        for _ in range(opts.max_backtracks):
            cand = _project(vec - step * grad, opts.w_q_floor)
            if not np.any(cand != vec):
                break
            cand_loss, _ = evaluate(cand, want_grad=False)
            if cand_loss <= loss + opts.armijo_c * float(grad @ (cand - vec)):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True  # no descent step exists at line-search resolution
            break
        vec = cand
        loss = cand_loss
        trace.append(loss)
        if loss <= opts.abs_tol:
            converged = True
            break
        if len(trace) > opts.patience:
            ref = trace[-1 - opts.patience]
            if ref - loss < opts.rel_tol * max(ref, 1e-30):
                converged = True
                break
        _, grad = evaluate(vec, want_grad=True)

    theta = PreferenceParams.from_vector(vec)
    preds = [predict_flows(theta, day, eq_tol=opts.eq_tol).values for day in days]
    obs = np.concatenate([day.flows.ravel() for day in days])
    pred = np.concatenate([p.ravel() for p in preds])
    ss_res = float(((pred - obs) ** 2).sum())
    ss_tot = float(((obs - obs.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res <= 1e-18 else 0.0)
    mae = float(np.abs(pred - obs).mean())
    return CalibrationReport(
        theta=theta,
        loss_trace=np.asarray(trace),
        r2=r2,
        mae=mae,
        converged=converged,
        wall_time=time.perf_counter() - t0,
        iterations=iters,
    )
