# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled best-response kernel; mirrors _br_py exactly."""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


cdef void _water_fill(const double* costs, const double* inv2g, double demand,
                      long* order, double* out, Py_ssize_t m) noexcept nogil:
    cdef Py_ssize_t i, j, k, best_k
    cdef long tmp
    cdef double cum_w, cum_cw, level, best_level, ci

    if demand <= 0.0:
        for j in range(m):
            out[j] = 0.0
        return

    # stable insertion sort of indices by cost ascending
    for j in range(m):
        order[j] = j
    for j in range(1, m):
        tmp = order[j]
        ci = costs[tmp]
        k = j - 1
        while k >= 0 and costs[order[k]] > ci:
            order[k + 1] = order[k]
            k -= 1
        order[k + 1] = tmp

    cum_w = 0.0
    cum_cw = 0.0
    best_k = 0
    best_level = 0.0
    for j in range(m):
        i = order[j]
        cum_w += inv2g[i]
        cum_cw += costs[i] * inv2g[i]
        level = (demand + cum_cw) / cum_w
        if level > costs[i]:
            best_k = j
            best_level = level

    for j in range(m):
        level = (best_level - costs[j]) * inv2g[j]
        out[j] = level if level > 0.0 else 0.0


def best_response_rounds(double[:, ::1] flow, double[::1] load,
                         const double[:, ::1] base, const double[::1] alpha,
                         double w_q, const double[::1] demands, int rounds):
    """Run ``rounds`` full best-response sweeps in place over (flow, load)."""
    cdef Py_ssize_t n = flow.shape[0]
    cdef Py_ssize_t m = flow.shape[1]
    cdef Py_ssize_t i, j, r
    cdef double[::1] slope = np.empty(m)
    cdef double[::1] inv2g = np.empty(m)
    cdef double[::1] costs = np.empty(m)
    cdef double[::1] new = np.empty(m)
    cdef long[::1] order = np.empty(m, dtype=np.int64)

    for j in range(m):
        slope[j] = w_q / alpha[j]
        inv2g[j] = alpha[j] / (2.0 * w_q)

    with nogil:
        for r in range(rounds):
            for i in range(n):
                for j in range(m):
                    costs[j] = base[i, j] + slope[j] * (load[j] - flow[i, j])
                _water_fill(&costs[0], &inv2g[0], demands[i], &order[0], &new[0], m)
                for j in range(m):
                    load[j] += new[j] - flow[i, j]
                    flow[i, j] = new[j]
