"""Implicit differentiation of the equilibrium map through its KKT system.

At a non-degenerate equilibrium the active set (strictly positive flows) is
locally stable, so differentiating the stationarity and demand constraints on
the active coordinates gives

    [H  A^T] [dF   ]   [-dg/dtheta]
    [A  0  ] [dlam ] = [ 0        ]

with H the potential Hessian restricted to active coordinates and A the
per-user demand rows. One LU factorization serves every parameter; the
adjoint form turns a flow-space loss gradient into parameter gradients with
a single extra solve.

Degenerate points (an unused route whose reduced cost sits inside the strict
complementarity margin) are flagged, and the derivative induced by the
converged active set is returned as the one-sided sub-gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .equilibrium import USED_ROUTE_REL, marginal_cost_matrix
from .errors import DegeneracyError, ShapeError, ValidationError

COMP_MARGIN = 1e-7   # strict-complementarity margin deciding degeneracy
KKT_PRE_TOL = 1e-6   # results must certify at least this well before differentiating

PARAM_KINDS = ("w_q", "w_d", "bias", "price", "capacity", "log_capacity", "delay")


@dataclass(frozen=True)
class ParamRef:
    """Descriptor of one differentiable market parameter."""

    kind: str
    j: int = -1
    i: int = -1

    def __post_init__(self):
        if self.kind not in PARAM_KINDS:
            raise ValidationError(f"unknown parameter kind {self.kind!r}")
        if self.kind in ("bias", "price", "capacity", "log_capacity") and self.j < 0:
            raise ValidationError(f"parameter {self.kind} needs a provider index")
        if self.kind == "delay" and (self.i < 0 or self.j < 0):
            raise ValidationError("delay parameter needs user and provider indices")


def theta_param_refs(m):
    """Parameter list matching PreferenceParams.as_vector(): w_q, w_d, b_0..b_{m-1}."""
    return [ParamRef("w_q"), ParamRef("w_d")] + [ParamRef("bias", j=j) for j in range(m)]


@dataclass(frozen=True)
class EquilibriumJacobian:
    wrt: ParamRef
    d_flow: np.ndarray
    active_set: np.ndarray
    degenerate: bool


@dataclass(frozen=True)
class LossGradient:
    values: np.ndarray
    degenerate: bool


class KKTSystem:
    """Factorized bordered system at one equilibrium; reusable across parameters."""

    def __init__(self, result, market, comp_margin=COMP_MARGIN, kkt_tol=KKT_PRE_TOL):
        if result.kkt_residual > kkt_tol:
            raise ValidationError(
                f"result KKT residual {result.kkt_residual:.3e} exceeds {kkt_tol:.1e}; "
                "solve to tolerance before differentiating"
            )
        self.market = market
        vals = result.flow.values
        demands = market.demands
        self.flow = vals
        self.loads = vals.sum(axis=0)
        self.active = vals > USED_ROUTE_REL * np.maximum(demands, 0.0)[:, None]

        # Strict complementarity: every inactive route of a demand-carrying user
        # must have reduced cost clear of the margin.
        marg = marginal_cost_matrix(vals, market)
        self.degenerate = False
        for i in range(market.n_users):
            if demands[i] <= 0:
                continue
            reduced = marg[i] - marg[i].min()
            if np.any(~self.active[i] & (reduced < comp_margin)):
                self.degenerate = True
                break

        coords = [(i, j) for i in range(market.n_users) for j in range(market.n_providers)
                  if self.active[i, j]]
        self.coords = coords
        self.coord_pos = {c: k for k, c in enumerate(coords)}
        act_users = sorted({i for i, _ in coords})
        self.act_users = act_users
        a, nu = len(coords), len(act_users)
        self.size = a + nu

        w_q = market.params.w_q
        alpha = market.capacities
        B = np.zeros((a + nu, a + nu))
        for k, (i, j) in enumerate(coords):
            for l, (i2, j2) in enumerate(coords):
                if j2 == j:
                    B[k, l] = w_q / alpha[j] * (2.0 if i2 == i else 1.0)
        user_row = {i: a + r for r, i in enumerate(act_users)}
        for k, (i, j) in enumerate(coords):
            B[k, user_row[i]] = 1.0
            B[user_row[i], k] = 1.0
        if a:
            self._lu = scipy.linalg.lu_factor(B)
            if not np.all(np.isfinite(self._lu[0])) or np.any(
                np.abs(np.diag(self._lu[0])) < 1e-14
            ):
                raise DegeneracyError("bordered KKT system is singular")
        else:
            self._lu = None

    # -- right-hand sides -------------------------------------------------

    def _grad_shift(self, wrt):
        """d(grad Phi)_ij / d(parameter) over the full flow shape."""
        mkt = self.market
        n, m = mkt.n_users, mkt.n_providers
        g = np.zeros((n, m))
        w_q, w_d, w_p = mkt.params.w_q, mkt.params.w_d, mkt.params.w_p
        alpha = mkt.capacities
        if wrt.kind == "w_q":
            g[:] = (self.loads[None, :] + self.flow) / alpha[None, :]
        elif wrt.kind == "w_d":
            g[:] = mkt.delays
        elif wrt.kind == "bias":
            g[:, wrt.j] = -1.0
        elif wrt.kind == "price":
            g[:, wrt.j] = w_p
        elif wrt.kind == "capacity":
            g[:, wrt.j] = -(w_q / alpha[wrt.j] ** 2) * (self.loads[wrt.j] + self.flow[:, wrt.j])
        elif wrt.kind == "log_capacity":
            g[:, wrt.j] = -(w_q / alpha[wrt.j]) * (self.loads[wrt.j] + self.flow[:, wrt.j])
        elif wrt.kind == "delay":
            g[wrt.i, wrt.j] = w_d
        return g

    def _restrict(self, full):
        return np.array([full[c] for c in self.coords])

    def d_flow(self, wrt):
        mkt = self.market
        out = np.zeros((mkt.n_users, mkt.n_providers))
        if self._lu is None:
            return out
        rhs = np.zeros(self.size)
        rhs[: len(self.coords)] = -self._restrict(self._grad_shift(wrt))
        sol = scipy.linalg.lu_solve(self._lu, rhs)
        for k, c in enumerate(self.coords):
            out[c] = sol[k]
        return out

    def jacobian(self, wrt):
        return EquilibriumJacobian(
            wrt=wrt, d_flow=self.d_flow(wrt), active_set=self.active.copy(),
            degenerate=self.degenerate,
        )

    def adjoint_gradient(self, loss_grad_flow, wrt_list):
        """Gradients of a flow-space loss wrt each parameter via one adjoint solve."""
        loss_grad_flow = np.asarray(loss_grad_flow, dtype=float)
        if loss_grad_flow.shape != self.flow.shape:
            raise ShapeError(
                f"loss gradient shape {loss_grad_flow.shape} vs flow {self.flow.shape}"
            )
        grads = np.zeros(len(wrt_list))
        if self._lu is None:
            return grads
        rhs = np.zeros(self.size)
        rhs[: len(self.coords)] = self._restrict(loss_grad_flow)
        adj = scipy.linalg.lu_solve(self._lu, rhs)[: len(self.coords)]
        for p, wrt in enumerate(wrt_list):
            grads[p] = -adj @ self._restrict(self._grad_shift(wrt))
        return grads


def equilibrium_jacobian(result, market, wrt, comp_margin=COMP_MARGIN):
    """d(flow)/d(parameter) at the equilibrium; flags degeneracy, never widens rows."""
    return KKTSystem(result, market, comp_margin=comp_margin).jacobian(wrt)


def loss_gradient(loss_grad_flow, result, market, wrt_list, comp_margin=COMP_MARGIN):
    """Chain a flow-space loss gradient through the equilibrium map.

    At degenerate points the returned values are the sub-gradient induced by
    the converged active set and ``degenerate`` is set.
    """
    system = KKTSystem(result, market, comp_margin=comp_margin)
    values = system.adjoint_gradient(loss_grad_flow, wrt_list)
    return LossGradient(values=values, degenerate=system.degenerate)
