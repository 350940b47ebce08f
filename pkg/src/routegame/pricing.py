"""Leader-side price optimization under user equilibrium.

The target's profit at price p is p times its equilibrium load. The profit
curve is continuous and piecewise smooth in p (kinks where the equilibrium
active set changes), so the default solver sweeps a coarse grid and refines
the best bracket by golden section, splitting brackets whose probes reveal a
kink. An exact oracle enumerates equilibrium support patterns, solves each
KKT system parametrically in p, and maximizes the per-pattern quadratic
profit on its validity interval; it is exhaustive, hence only usable at
small scale.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np

from .equilibrium import solve_equilibrium
from .errors import ScaleError, ValidationError

EXACT_CELL_BOUND = 12   # enumeration allowed while n_users * n_providers <= bound
DENSE_GRID_STEP = 1e-3  # fraction of price_cap used by the fallback profit oracle


@dataclass
class PricingResult:
    best_price: float
    best_profit: float
    curve: np.ndarray              # rows of (price, profit, target_load)
    method: str
    oracle_ratio: float | None = None
    solve_time: float = 0.0
    abstracted_curve: np.ndarray | None = None

    def to_dict(self):
        out = {
            "best_price": self.best_price,
            "best_profit": self.best_profit,
            "method": self.method,
            "oracle_ratio": self.oracle_ratio,
            "curve": [[float(v) for v in row] for row in np.asarray(self.curve)],
        }
        if self.abstracted_curve is not None:
            out["abstracted_curve"] = [
                [float(v) for v in row] for row in np.asarray(self.abstracted_curve)
            ]
        return out


def profit(price, market, eq_tol=None):
    """(profit, target_load) at the given target price; load is the target column sum."""
    if not 0 <= price <= market.price_cap:
        raise ValidationError(f"price {price} outside [0, {market.price_cap}]")
    kwargs = {} if eq_tol is None else {"tol": eq_tol}
    result = solve_equilibrium(market.with_target_price(float(price)), **kwargs)
    load = float(result.flow.values[:, -1].sum())
    return float(price) * load, load


def profit_curve(market, grid):
    """Independent profit evaluations over a sorted in-range price grid."""
    grid = np.asarray(grid, dtype=float)
    if grid.size and (np.diff(grid) < 0).any():
        raise ValidationError("price grid must be sorted ascending")
    rows = []
    for p in grid:
        psi, load = profit(float(p), market)
        rows.append((float(p), psi, load))
    return np.asarray(rows).reshape(-1, 3)


class _ProfitMemo:
    def __init__(self, market):
        self.market = market
        self.cache = {}

    def __call__(self, p):
        p = float(p)
        if p not in self.cache:
            self.cache[p] = profit(p, self.market)
        return self.cache[p][0]

    def samples(self):
        rows = [(p, psi, load) for p, (psi, load) in self.cache.items()]
        rows.sort()
        return np.asarray(rows).reshape(-1, 3)


_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


def _golden_refine(f, lo, hi, tol):
    """Golden-section maximization that splits brackets on unimodality violations."""
    stack = [(lo, hi)]
    while stack:
        a, b = stack.pop()
        if b - a <= tol:
            f(0.5 * (a + b))
            continue
        fa, fb = f(a), f(b)
        x1 = b - _INVPHI * (b - a)
        x2 = a + _INVPHI * (b - a)
        f1, f2 = f(x1), f(x2)
        while b - a > tol:
            slack = 1e-9 * max(1.0, abs(fa), abs(fb), abs(f1), abs(f2))
            if f1 < min(fa, f2) - slack:  # interior dip: a kink hides in here
                stack.append((a, x1))
                stack.append((x1, b))
                break
            if f2 < min(f1, fb) - slack:
                stack.append((a, x2))
                stack.append((x2, b))
                break
            if f1 < f2:
                a, fa = x1, f1
                x1, f1 = x2, f2
                x2 = a + _INVPHI * (b - a)
                f2 = f(x2)
            else:
                b, fb = x2, f2
                x2, f2 = x1, f1
                x1 = b - _INVPHI * (b - a)
                f1 = f(x1)
        else:
            f(0.5 * (a + b))


def optimize_price_sweep(market, coarse_points=64, refine_tol=None):
    """Uniform coarse sweep over [0, price_cap] plus golden-section refinement."""
    if coarse_points < 8:
        raise ValidationError("coarse sweep needs at least 8 points")
    cap = market.price_cap
    if refine_tol is None:
        refine_tol = cap * 1e-4
    t0 = time.perf_counter()
    f = _ProfitMemo(market)
    grid = np.linspace(0.0, cap, coarse_points)
    values = np.array([f(p) for p in grid])
    k = int(values.argmax())
    lo = grid[max(k - 1, 0)]
    hi = grid[min(k + 1, coarse_points - 1)]
    _golden_refine(f, lo, hi, refine_tol)
    best_price, (best_profit, _) = max(f.cache.items(), key=lambda kv: (kv[1][0], -kv[0]))
    return PricingResult(
        best_price=float(best_price),
        best_profit=float(best_profit),
        curve=f.samples(),
        method="sweep_refine",
        solve_time=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# Exact oracle: enumeration of equilibrium support patterns
# ---------------------------------------------------------------------------


def optimize_price_exact(market):
    """Globally optimal target price by support-pattern enumeration.

    For every candidate active set, the equality-constrained KKT system is
    linear in flows and affine in the target price, so the equilibrium on
    that pattern is an affine function of p. The pattern is valid on the
    price interval where its flows stay nonnegative and every excluded route
    is no cheaper than the user's marginal cost; on each interval the profit
    is an explicit quadratic, maximized in closed form.
    """
    n, m = market.n_users, market.n_providers
    if n * m > EXACT_CELL_BOUND:
        raise ScaleError(
            f"{n} users x {m} providers exceeds the enumeration bound "
            f"({EXACT_CELL_BOUND} cells); use optimize_price_sweep"
        )
    t0 = time.perf_counter()
    cap = market.price_cap
    w_q, w_d, w_p = market.params.w_q, market.params.w_d, market.params.w_p
    alpha = market.capacities
    delays = market.delays
    biases = market.biases
    prices = market.prices
    demands = market.demands
    s = m - 1

    # Base cost split into constant part and the coefficient of p_s.
    c0 = w_p * prices[None, :] + w_d * delays - biases[None, :]
    c0 = np.array(c0)
    c0[:, s] -= w_p * prices[s]  # target price handled parametrically
    cp = np.zeros((n, m))
    cp[:, s] = w_p

    live = [i for i in range(n) if demands[i] > 0]
    subsets = [tuple(c) for k in range(1, m + 1) for c in itertools.combinations(range(m), k)]
    total_demand = float(demands.sum())

    candidates = []  # (analytic profit, price)
    for pattern in itertools.product(subsets, repeat=len(live)):
        coords = [(i, j) for i, sub in zip(live, pattern) for j in sub]
        a = len(coords)
        nu = len(live)
        B = np.zeros((a + nu, a + nu))
        for k1, (i1, j1) in enumerate(coords):
            for k2, (i2, j2) in enumerate(coords):
                if j1 == j2:
                    B[k1, k2] = w_q / alpha[j1] * (2.0 if i1 == i2 else 1.0)
        urow = {i: a + r for r, i in enumerate(live)}
        for k1, (i1, j1) in enumerate(coords):
            B[k1, urow[i1]] = -1.0
            B[urow[i1], k1] = 1.0
        rhs0 = np.concatenate([[-c0[i, j] for i, j in coords], [demands[i] for i in live]])
        rhs1 = np.concatenate([[-cp[i, j] for i, j in coords], np.zeros(nu)])
        try:
            sol = np.linalg.solve(B, np.column_stack([rhs0, rhs1]))
        except np.linalg.LinAlgError:
            continue
        f0, f1 = sol[:a, 0], sol[:a, 1]
        nu0, nu1 = sol[a:, 0], sol[a:, 1]

        # Affine feasibility constraints a0 + a1 * p >= 0.
        constraints = list(zip(f0, f1))
        load0 = np.zeros(m)
        load1 = np.zeros(m)
        for k1, (i1, j1) in enumerate(coords):
            load0[j1] += f0[k1]
            load1[j1] += f1[k1]
        coord_set = set(coords)
        for r, i in enumerate(live):
            for j in range(m):
                if (i, j) in coord_set:
                    continue
                a0 = c0[i, j] + w_q / alpha[j] * load0[j] - nu0[r]
                a1 = cp[i, j] + w_q / alpha[j] * load1[j] - nu1[r]
                constraints.append((a0, a1))

        plo, phi = 0.0, cap
        feasible = True
        for a0, a1 in constraints:
            feas = 1e-9 * max(1.0, abs(a0))
            if abs(a1) <= 1e-13:
                if a0 < -feas:
                    feasible = False
                    break
            elif a1 > 0:
                plo = max(plo, (-a0 - feas) / a1)
            else:
                phi = min(phi, (-a0 - feas) / a1)
        if not feasible or plo > phi + 1e-12:
            continue

        ls0, ls1 = load0[s], load1[s]
        probes = [plo, phi]
        if ls1 < -1e-15:
            vertex = -ls0 / (2.0 * ls1)
            if plo < vertex < phi:
                probes.append(vertex)
        for p in probes:
            p = min(max(p, 0.0), cap)
            load = ls0 + ls1 * p
            # near-singular pattern systems can pass the affine checks with
            # garbage solutions; implausible loads are discarded outright
            if load < -1e-6 or load > total_demand * (1.0 + 1e-6) + 1e-9:
                continue
            candidates.append((p * load, p))

    if not candidates:
        raise ValidationError("no support pattern is feasible; market is malformed")

    # Verify candidates best-first by re-solving the equilibrium: stop once the
    # best attained profit dominates every remaining analytic value.
    seen = set()
    verified = []  # (price, attained profit, load)
    best = None
    for value, price in sorted(candidates, key=lambda t: (-t[0], t[1])):
        if best is not None and best[1] >= value - 1e-12 * max(1.0, abs(value)):
            break
        key = round(price, 12)
        if key in seen:
            continue
        seen.add(key)
        psi, load = profit(price, market)
        verified.append((price, psi, load))
        if best is None or psi > best[1]:
            best = (price, psi, load)

    verified.sort()
    return PricingResult(
        best_price=float(best[0]),
        best_profit=float(best[1]),
        curve=np.asarray(verified).reshape(-1, 3),
        method="exact_piecewise",
        solve_time=time.perf_counter() - t0,
    )


def dense_grid_profit(market, step_fraction=DENSE_GRID_STEP):
    """Best profit over a dense uniform price grid; the large-scale oracle stand-in."""
    points = int(round(1.0 / step_fraction)) + 1
    grid = np.linspace(0.0, market.price_cap, points)
    best_p, best_v = 0.0, 0.0
    for p in grid:
        v, _ = profit(float(p), market)
        if v > best_v:
            best_p, best_v = float(p), v
    return best_p, best_v


def oracle_profit(market):
    """(best_profit, kind): exact enumeration when affordable, dense grid otherwise."""
    if market.n_users * market.n_providers <= EXACT_CELL_BOUND:
        return optimize_price_exact(market).best_profit, "exact"
    return dense_grid_profit(market)[1], "grid"


def optimize_price_abstracted(
    market,
    scorer,
    K,
    coarse_points=64,
    refine_tol=None,
    compute_oracle=False,
):
    """Abstract the market, optimize the price there, evaluate it in the original.

    The reported best_profit is the chosen price's true profit in the original
    market. When an oracle is affordable (exact enumeration, else a dense
    grid), oracle_ratio relates the true profit to the oracle's optimum.
    """
    from .abstraction import aggregate, score_rivals

    t0 = time.perf_counter()
    scores = score_rivals(scorer, market)
    abst = aggregate(market, scores, min(K, market.n_rivals))
    small = abst.market
    if small.n_users * small.n_providers <= EXACT_CELL_BOUND:
        inner = optimize_price_exact(small)
    else:
        inner = optimize_price_sweep(small, coarse_points=coarse_points, refine_tol=refine_tol)
    best_price = inner.best_price
    true_profit, true_load = profit(best_price, market)
    elapsed = time.perf_counter() - t0

    ratio = None
    if compute_oracle:
        if market.n_users * market.n_providers <= EXACT_CELL_BOUND:
            denom = optimize_price_exact(market).best_profit
        else:
            denom = max(dense_grid_profit(market)[1], true_profit)
        ratio = true_profit / denom if denom > 0 else 1.0

    return PricingResult(
        best_price=float(best_price),
        best_profit=float(true_profit),
        curve=np.asarray([(best_price, true_profit, true_load)]).reshape(-1, 3),
        method=f"abstracted_{inner.method}",
        oracle_ratio=ratio,
        solve_time=elapsed,
        abstracted_curve=inner.curve,
    )
