"""Pure-Python (numpy) best-response kernel; fallback for the compiled twin.

Both implementations run identical round-robin sweeps: for each user in index
order, replace her row with the exact minimizer of her cost holding everyone
else fixed, updating the shared load vector in place.
"""

import numpy as np

BACKEND = "python"


def water_fill(costs, inv_slopes, demand):
    """Exact minimizer of sum_j (c_j x_j + x_j^2 / (2 s_j)) on the scaled simplex.

    ``inv_slopes[j]`` is 1/(2 g_j) for quadratic coefficient g_j; the solution
    is x_j = max(0, (nu - c_j) * inv_slopes[j]) with nu the water level that
    spends exactly ``demand``.
    """
    if demand <= 0.0:
        return np.zeros_like(costs)
    order = np.argsort(costs, kind="stable")
    cs = costs[order]
    ws = inv_slopes[order]
    cum_w = np.cumsum(ws)
    cum_cw = np.cumsum(cs * ws)
    levels = (demand + cum_cw) / cum_w
    k = np.nonzero(levels > cs)[0][-1]  # last prefix whose level clears its costliest member
    return np.maximum(0.0, (levels[k] - costs) * inv_slopes)


def best_response_rounds(flow, load, base, alpha, w_q, demands, rounds):
    """Run ``rounds`` full best-response sweeps in place over (flow, load)."""
    n, m = flow.shape
    slope = w_q / alpha
    inv2g = alpha / (2.0 * w_q)
    for _ in range(rounds):
        for i in range(n):
            costs = base[i] + slope * (load - flow[i])
            new = water_fill(costs, inv2g, demands[i])
            load += new - flow[i]
            flow[i] = new
