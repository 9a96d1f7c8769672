"""Prices, payments and profit from the solved program's multipliers.

The balance multipliers price nominal power; the response-balance and
line-response multipliers price the entries of the response matrix (the
reserve product).  Congestion enters through the line-limit multipliers, so
without binding line limits every participant sees the same nodal price.
Signs follow the solver's Lagrangian convention; prices are quoted so a
participant maximizing (payments - expected cost) is stationary at the
system optimum.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .horizon_model import expected_cost_coefficients

__all__ = ["PriceSet", "Settlement", "extract_prices", "settlement",
           "per_product_quote", "per_impulse_quote", "participant_stationarity"]


@dataclass(frozen=True)
class PriceSet:
    """System multipliers and the per-participant prices derived from them.

    lam/Pi/nu/Psi are the balance, response-balance, line-limit and
    line-response multipliers; lam_i and Pi_i map participant id to its
    nodal power price vector (per step) and policy price matrix (per causal
    response entry).  Strictly noncausal entries of Pi_i are zero-filled:
    they price nothing tradable.
    """

    lam: np.ndarray
    Pi: np.ndarray
    nu: np.ndarray
    Psi: np.ndarray
    lam_i: dict
    Pi_i: dict

    def nodal_per_mwh(self, pid, tau):
        """Nodal price in currency/MWh for interval length tau hours."""
        return self.lam_i[pid] / tau


@dataclass(frozen=True)
class Settlement:
    power_payment: float
    reserve_payment: float
    expected_cost: float
    expected_profit: float


def _gamma_T_times(flowmap, pid, vec_rows):
    """Gamma_i' applied to a stacked per-line-row vector or matrix."""
    g = flowmap.static_column(pid)
    L2 = flowmap.rows_per_step
    T = flowmap.T
    v = np.asarray(vec_rows)
    if v.ndim == 1:
        return v.reshape(T, L2) @ g
    return np.einsum("d,sdc->sc", g, v.reshape(T, L2, -1))


def extract_prices(solution, program) -> PriceSet:
    """Derive the price set from an optimal solution of the program."""
    if solution.status != "optimal":
        raise ValidationError(f"cannot price a solve with status {solution.status}")
    T = program.T
    nd = program.n_delta * T
    lam = np.asarray(solution.eq_duals["balance_nominal"], dtype=float)
    Pi = np.zeros((T, nd))
    resp = solution.eq_duals.get("balance_response")
    if resp is not None:
        for val, (t, c) in zip(resp, program.response_rows):
            Pi[t, c] = val
    m_line = program.flowmap.n_rows
    nu = np.asarray(solution.ineq_duals.get("line_limit", np.zeros(m_line)),
                    dtype=float)
    Psi = np.zeros((m_line, nd))
    line_resp = solution.eq_duals.get("line_response")
    if line_resp is not None and m_line:
        Psi = np.asarray(line_resp, dtype=float).reshape(m_line, nd)
    lam_i = {}
    Pi_i = {}
    noncausal = np.zeros((T, nd), dtype=bool)
    for l in range(T):
        noncausal[l, (l + 1) * program.n_delta:] = True
    for p in program.participants:
        if not p.elastic:
            continue
        if m_line:
            congested_lam = lam + _gamma_T_times(program.flowmap, p.id, nu)
            congested_pi = Pi + _gamma_T_times(program.flowmap, p.id, Psi)
        else:
            congested_lam = lam.copy()
            congested_pi = Pi.copy()
        CB = p.dynamics.C @ p.dynamics.B
        identity = bool(np.max(np.abs(CB - np.eye(T))) <= 1e-12)
        if identity:
            li = -congested_lam
            pi = -congested_pi
        else:
            li = -(CB.T @ congested_lam)
            pi = -(CB.T @ congested_pi)
        pi = np.where(noncausal, 0.0, pi)
        lam_i[p.id] = li
        Pi_i[p.id] = pi
    return PriceSet(lam=lam, Pi=Pi, nu=nu, Psi=Psi, lam_i=lam_i, Pi_i=Pi_i)


def settlement(policy, prices: PriceSet, participant, moments) -> Settlement:
    """Payments and expected profit for one elastic participant."""
    if not participant.elastic:
        raise ValidationError(
            f"participant {participant.id} is inelastic; no settlement entry")
    li = prices.lam_i[participant.id]
    pi = prices.Pi_i[participant.id]
    power = float(li @ policy.e)
    reserve = float(np.sum(pi * policy.D))
    cost = expected_cost_coefficients(participant, moments).evaluate(
        policy.e, policy.D)
    return Settlement(power_payment=power, reserve_payment=reserve,
                      expected_cost=cost,
                      expected_profit=-cost + power + reserve)


def per_product_quote(prices: PriceSet, policy, pid, l):
    """Itemized payment for the decision at step l (row reading).

    Returns (power_term, reserve_terms, total) where reserve_terms lists
    (column, price, quantity, value) for each causal response entry in row l.
    """
    if not (0 <= l < policy.T):
        raise ValidationError(f"row {l} outside horizon {policy.T}")
    li = prices.lam_i[pid]
    pi = prices.Pi_i[pid]
    nd = policy.n_delta
    power_term = float(li[l] * policy.e[l])
    terms = []
    for c in range((l + 1) * nd):
        if policy.D[l, c] != 0.0 or pi[l, c] != 0.0:
            terms.append((c, float(pi[l, c]), float(policy.D[l, c]),
                          float(pi[l, c] * policy.D[l, c])))
    total = power_term + sum(t[3] for t in terms)
    return power_term, terms, total


def per_impulse_quote(prices: PriceSet, policy, pid, c):
    """Itemized payment for response column c (planned impulse response).

    The column groups, across rows, the same payments as the row reading;
    totals over all columns plus the power terms match the settlement.
    """
    nd = policy.n_delta
    if not (0 <= c < policy.T * nd):
        raise ValidationError(f"column {c} outside response width")
    pi = prices.Pi_i[pid]
    terms = []
    for l in range(policy.T):
        if c < (l + 1) * nd and (policy.D[l, c] != 0.0 or pi[l, c] != 0.0):
            terms.append((l, float(pi[l, c]), float(policy.D[l, c]),
                          float(pi[l, c] * policy.D[l, c])))
    return terms, sum(t[3] for t in terms)


def participant_stationarity(program, solution, prices: PriceSet):
    """Per-participant gradient check of the pricing decomposition.

    At the optimum, the gradient of the expected cost in (e_i, D_i) equals
    the participant's prices minus its local-constraint dual contributions;
    returns the max absolute residual per participant id.
    """
    out = {}
    T = program.T
    nd = program.n_delta * T
    x = solution.primal
    reg = program.regularization
    for p in program.participants:
        if not p.elastic:
            continue
        pid = p.id
        quad = expected_cost_coefficients(p, program.moments)
        e = x[program.e_slices[pid]]
        dv = x[program.d_slices[pid]]
        M = p.local.T_mat @ p.dynamics.B + p.local.U_mat
        kept = program.kept_rows[pid]
        mu_local = solution.ineq_duals.get(f"local_limit:{pid}", np.zeros(0))
        grad_e = quad.P_ee @ e + quad.g_e + reg * e
        if dv.size:
            freeflat = np.array([l * nd + c for (l, c) in program.free_entries])
            grad_e = grad_e + quad.P_ed[:, freeflat] @ dv
        res_e = grad_e - prices.lam_i[pid]
        if kept.size:
            res_e = res_e + M[kept].T @ mu_local
        worst = float(np.abs(res_e).max())
        if dv.size:
            freeflat = np.array([l * nd + c for (l, c) in program.free_entries])
            grad_d = (quad.P_dd[np.ix_(freeflat, freeflat)] @ dv
                      + quad.g_d[freeflat] + reg * dv
                      + quad.P_ed[:, freeflat].T @ e)
            omega = solution.eq_duals.get(f"local_response:{pid}")
            Pi_p = prices.Pi_i[pid]
            for k, (l, c) in enumerate(program.free_entries):
                r = grad_d[k] - Pi_p[l, c]
                if omega is not None and kept.size:
                    om = omega.reshape(kept.size, nd)
                    r += float(M[kept][:, l] @ om[:, c])
                worst = max(worst, abs(float(r)))
        out[pid] = worst
    return out
