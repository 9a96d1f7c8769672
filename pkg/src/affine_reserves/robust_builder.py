"""Assembly of the finite robust counterpart QP.

Semi-infinite constraints "hold for every error trajectory delta in the
uncertainty set" are replaced exactly, via LP duality, by finite blocks:
for each robustified inequality row a new nonnegative multiplier column is
introduced, tied to the row's delta-coefficient by an equality and charged
the set's support value in the inequality.  The decision variables are, per
elastic participant, the nominal schedule e, the free (causal) entries of
the response matrix D and the local multiplier block Y; one shared
multiplier block Z covers the line limits.

Variable layout (fixed participant order, deterministic):
    [e_1 | d_1 | y_1 | e_2 | d_2 | y_2 | ... | z]
with d_i the masked free entries of D_i in row-major order, y_i flattened
as (q_rows x kept_local_rows) row-major, z as (q_rows x line_rows) row-major.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InfeasibleModelError, SolverToleranceError, ValidationError
from .horizon_model import expected_cost_coefficients, verify_direct_feedthrough
from .network import balance_residual, injections_by_node, line_flows
from .uncertainty import MomentEstimate

__all__ = ["AffinePolicy", "RobustProgram", "causality_mask", "dualize_row",
           "DualizedRow", "assemble_robust_program", "assemble_prescient_program",
           "extract_policies", "dump_program", "load_program_dump"]


@dataclass(frozen=True)
class AffinePolicy:
    """Affine reserve policy u = D delta + e.

    D is (T x N_delta*T) with zero blocks above the causal diagonal; e is the
    nominal schedule in MW.  This pair is the tradable product: e is priced
    per step, D per causal entry.
    """

    D: np.ndarray
    e: np.ndarray

    def __post_init__(self):
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        e = np.asarray(self.e, dtype=float).reshape(-1)
        T = e.size
        if D.shape[0] != T or D.shape[1] % T != 0:
            raise ValidationError(
                f"policy dimensions disagree: D {D.shape}, e {e.shape}")
        nd = D.shape[1] // T
        for l in range(T):
            if np.any(D[l, (l + 1) * nd:] != 0.0):
                raise ValidationError(
                    f"policy row {l} responds to future errors (causality)")
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "e", e)

    @property
    def T(self):
        return self.e.size

    @property
    def n_delta(self):
        return self.D.shape[1] // self.e.size


def causality_mask(T, n_delta, band=None):
    """Free entries (l, c) of the response matrix, row-major.

    Block (l, m) is free when 0 <= l - m <= band - 1; band=None (or >= T)
    means every causal block, band=1 the block diagonal only.
    """
    if T < 1 or n_delta < 1:
        raise ValidationError("T and n_delta must be >= 1")
    depth = T if band is None else int(band)
    if depth < 1:
        raise ValidationError(f"band must be >= 1, got {band}")
    out = []
    for l in range(T):
        for c in range(n_delta * T):
            m = c // n_delta
            if 0 <= l - m <= depth - 1:
                out.append((l, c))
    return out


@dataclass(frozen=True)
class DualizedRow:
    """Tightest multiplier column for one robustified inequality row."""

    z: np.ndarray
    value: float


def dualize_row(coeff_row, delta) -> DualizedRow:
    """Multiplier column z >= 0 with S'z = coeff_row minimizing h'z.

    h'z at the optimum equals the support function max_{delta} coeff'delta,
    so "coeff'delta <= s for all delta" holds iff h'z <= s.  Boxes admit the
    positive/negative-part split in closed form; general bounded sets fall
    back to an LP.
    """
    a = np.asarray(coeff_row, dtype=float).reshape(-1)
    if hasattr(delta, "lower") and hasattr(delta, "upper"):
        if a.size != delta.dim:
            raise ValidationError("coefficient dimension disagrees with the set")
        pos = np.maximum(a, 0.0)
        neg = np.maximum(-a, 0.0)
        z = np.concatenate([pos, neg])
        return DualizedRow(z=z, value=float(delta.h @ z))
    S = np.asarray(delta.S, dtype=float)
    h = np.asarray(delta.h, dtype=float)
    from .polytopes import is_bounded
    if not is_bounded(S):
        raise ValidationError("uncertainty set must be bounded")
    from scipy.optimize import linprog
    res = linprog(h, A_eq=S.T, b_eq=a, bounds=[(0, None)] * h.size,
                  method="highs")
    if res.status != 0:
        raise ValidationError(f"dualization LP failed (status {res.status})")
    return DualizedRow(z=res.x, value=float(res.fun))


@dataclass
class RobustProgram:
    """Assembled QP with labelled constraint blocks and a variable index map.

    Solvable by qp_core.solve_qp; carries enough context (participants,
    flow map, uncertainty set, moments) for policy extraction, audits and
    pricing downstream.
    """

    P: sp.spmatrix
    f: np.ndarray
    const: float
    A_eq: sp.spmatrix
    b_eq: np.ndarray
    eq_blocks: list
    A_in: sp.spmatrix
    b_in: np.ndarray
    ineq_blocks: list
    T: int
    n_delta: int
    n_var: int
    elastic_ids: list
    e_slices: dict
    d_slices: dict
    y_slices: dict
    z_slice: slice
    free_entries: list
    kept_rows: dict
    participants: tuple
    flowmap: object
    delta: object = None          # None for the deterministic variant
    moments: object = None
    band: int | None = None
    regularization: float = 0.0
    future_delta: np.ndarray | None = None
    response_rows: list = field(default_factory=list)

    @property
    def q_rows(self):
        return 0 if self.delta is None else self.delta.q_rows

    @property
    def m_line(self):
        return self.flowmap.n_rows

    def block_rows(self, label, kind="eq"):
        blocks = self.eq_blocks if kind == "eq" else self.ineq_blocks
        for name, start, stop in blocks:
            if name == label:
                return start, stop
        raise KeyError(label)


class _Triplets:
    """Accumulates (row, col, value) arrays for sparse assembly."""

    def __init__(self):
        self.rows = []
        self.cols = []
        self.vals = []

    def add(self, rows, cols, vals):
        rows = np.asarray(rows, dtype=np.int64).reshape(-1)
        cols = np.asarray(cols, dtype=np.int64).reshape(-1)
        vals = np.asarray(vals, dtype=float).reshape(-1)
        if not (rows.size == cols.size == vals.size):
            raise ValueError("triplet arrays disagree")
        self.rows.append(rows)
        self.cols.append(cols)
        self.vals.append(vals)

    def add_dense(self, r0, c0, block):
        block = np.atleast_2d(block)
        rr, cc = np.nonzero(block)
        self.add(r0 + rr, c0 + cc, block[rr, cc])

    def matrix(self, shape):
        if self.rows:
            rows = np.concatenate(self.rows)
            cols = np.concatenate(self.cols)
            vals = np.concatenate(self.vals)
        else:
            rows = cols = vals = np.zeros(0)
        return sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsc()


def _prepare(participants, flowmap, x0s):
    if x0s:
        updated = []
        for p in participants:
            if p.elastic and p.id in x0s:
                updated.append(p.with_state(x0s[p.id]))
            else:
                updated.append(p)
        participants = updated
    participants = tuple(participants)
    elastic = [p for p in participants if p.elastic]
    if not elastic:
        raise InfeasibleModelError("no elastic participants can balance the system",
                                   block="balance_nominal")
    T = elastic[0].dynamics.T
    for p in participants:
        if p.T != T:
            raise ValidationError(f"participant {p.id} horizon {p.T} != {T}")
    if flowmap.T != T:
        raise ValidationError("flow map horizon disagrees with participants")
    return participants, elastic, T


def _participant_blocks(p):
    """Per-participant constant matrices used by the assembly."""
    dyn = p.dynamics
    M = p.local.T_mat @ dyn.B + p.local.U_mat          # schedule coefficient
    TAx0 = p.local.T_mat @ (dyn.A @ p.x0)
    CAx0 = dyn.C @ (dyn.A @ p.x0)
    cb_identity = verify_direct_feedthrough(dyn)
    CB = None if cb_identity else dyn.C @ dyn.B
    V = p.local.V_mat
    nonzero = np.abs(M).max(axis=1) > 0
    if V is not None:
        nonzero = nonzero | (np.abs(V).max(axis=1) > 0)
    kept = np.flatnonzero(nonzero)
    return M, TAx0, CAx0, CB, V, kept


def _check_skipped_rows(p, M, TAx0, kept):
    """Rows with no schedule or error coupling must hold as constants."""
    skipped = np.setdiff1d(np.arange(p.local.n_rows), kept)
    if skipped.size:
        resid = TAx0[skipped] - p.local.w[skipped]
        worst = resid.max()
        if worst > 1e-9:
            r = skipped[int(np.argmax(resid))]
            raise InfeasibleModelError(
                f"participant {p.id}: constant local row {r} violated by {worst:.3e}",
                block=f"local_limit:{p.id}")


def assemble_robust_program(participants, flowmap, delta, moments, x0s=None, *,
                            band=None, regularization=1e-8) -> RobustProgram:
    """Build the robust-counterpart QP over affine policies.

    Equality blocks: nominal balance, response balance (one row per free
    policy entry), line-response match (ties Z to the line rows' delta
    coefficients) and per-participant local-response match (ties Y_i).
    Inequality blocks: dualized line limits, dualized local rows, and
    nonnegativity of the multiplier blocks.  `band` restricts the policy
    structure (1 = diagonal, None = full causal); `regularization` adds a
    small diagonal on the policy variables so the optimum is unique.
    """
    participants, elastic, T = _prepare(participants, flowmap, x0s)
    nd = np.asarray(moments.mean_q).size
    if nd % T != 0:
        raise ValidationError("moment dimension is not a multiple of T")
    n_delta = nd // T
    if delta.dim != nd:
        raise ValidationError("uncertainty set dimension disagrees with moments")
    q = delta.q_rows
    h = delta.h
    mask = causality_mask(T, n_delta, band=band)
    n_free = len(mask)
    dpos = {lc: k for k, lc in enumerate(mask)}
    mask_l = np.array([l for l, _ in mask])
    mask_c = np.array([c for _, c in mask])

    m_line = flowmap.n_rows
    L2 = flowmap.rows_per_step

    blocks = {p.id: _participant_blocks(p) for p in elastic}
    for p in elastic:
        M, TAx0, _, _, _, kept = blocks[p.id]
        _check_skipped_rows(p, M, TAx0, kept)

    # ---- variable layout ----
    e0, d0, y0 = {}, {}, {}
    off = 0
    for p in elastic:
        kept = blocks[p.id][5]
        e0[p.id] = off
        d0[p.id] = off + T
        y0[p.id] = off + T + n_free
        off += T + n_free + q * kept.size
    z0 = off
    n_var = off + q * m_line

    # ---- objective ----
    Pt = _Triplets()
    f = np.zeros(n_var)
    const = 0.0
    freeflat = mask_l * nd + mask_c
    for p in elastic:
        quad = expected_cost_coefficients(p, moments)
        Pt.add_dense(e0[p.id], e0[p.id], quad.P_ee)
        Pdd = quad.P_dd[np.ix_(freeflat, freeflat)]
        Pt.add_dense(d0[p.id], d0[p.id], Pdd)
        if np.any(quad.P_ed):
            Ped = quad.P_ed[:, freeflat]
            Pt.add_dense(e0[p.id], d0[p.id], Ped)
            Pt.add_dense(d0[p.id], e0[p.id], Ped.T)
        f[e0[p.id]:e0[p.id] + T] = quad.g_e
        f[d0[p.id]:d0[p.id] + n_free] = quad.g_d[freeflat]
        const += quad.const
        if regularization:
            idx = np.arange(e0[p.id], e0[p.id] + T + n_free)
            Pt.add(idx, idx, np.full(idx.size, regularization))
    P = Pt.matrix((n_var, n_var))

    # ---- equalities ----
    At = _Triplets()
    b_eq_parts = []
    eq_blocks = []
    row = 0

    # nominal balance: sum_i CB_i e_i = -(sum r_i + sum C_i A_i x0_i)
    rhs = np.zeros(T)
    for p in participants:
        rhs -= p.r
    for p in elastic:
        _, _, CAx0, CB, _, _ = blocks[p.id]
        rhs -= CAx0
        if CB is None:
            At.add(row + np.arange(T), e0[p.id] + np.arange(T), np.ones(T))
        else:
            At.add_dense(row, e0[p.id], CB)
    eq_blocks.append(("balance_nominal", row, row + T))
    b_eq_parts.append(rhs)
    row += T

    # response balance: sum_i (G_i + CB_i D_i) = 0, one row per free entry.
    G_sum = np.zeros((T, nd))
    for p in participants:
        if p.G is not None:
            G_sum += p.G
    mask_bool = np.zeros((T, nd), dtype=bool)
    mask_bool[mask_l, mask_c] = True
    general_cb = any(blocks[p.id][3] is not None for p in elastic)
    if not general_cb:
        stray = np.abs(G_sum[~mask_bool]).max() if (~mask_bool).any() else 0.0
        if stray > 1e-9:
            raise InfeasibleModelError(
                "inelastic error response outside the policy structure "
                f"(magnitude {stray:.3e})", block="balance_response")
        response_rows = list(mask)
        for p in elastic:
            At.add(row + np.arange(n_free), d0[p.id] + np.arange(n_free),
                   np.ones(n_free))
        b_eq_parts.append(-G_sum[mask_l, mask_c])
        eq_blocks.append(("balance_response", row, row + n_free))
        row += n_free
    else:
        response_rows = []
        rhs_rows = []
        for t in range(T):
            for c in range(nd):
                coeffs = []
                for p in elastic:
                    CB = blocks[p.id][3]
                    if CB is None:
                        if (t, c) in dpos:
                            coeffs.append((d0[p.id] + dpos[(t, c)], 1.0))
                    else:
                        for l in range(T):
                            if (l, c) in dpos and CB[t, l] != 0.0:
                                coeffs.append((d0[p.id] + dpos[(l, c)], CB[t, l]))
                if coeffs:
                    for col, val in coeffs:
                        At.add([row], [col], [val])
                    rhs_rows.append(-G_sum[t, c])
                    response_rows.append((t, c))
                    row += 1
                elif abs(G_sum[t, c]) > 1e-9:
                    raise InfeasibleModelError(
                        f"error response row ({t},{c}) has no free policy entry",
                        block="balance_response")
        b_eq_parts.append(np.asarray(rhs_rows))
        eq_blocks.append(("balance_response",
                          row - len(response_rows), row))

    # line-response match: sum_i Gamma_i (G_i + CB_i D_i) = Z'S.
    if m_line:
        nrows = m_line * nd
        flat = np.arange(nrows)
        cc = flat % nd
        rr = flat // nd
        At.add(row + flat, z0 + cc * m_line + rr, -np.ones(nrows))
        At.add(row + flat, z0 + (nd + cc) * m_line + rr, np.ones(nrows))
        for p in elastic:
            g = flowmap.static_column(p.id)
            CB = blocks[p.id][3]
            if CB is None:
                rows_i = ((mask_l[:, None] * L2 + np.arange(L2)[None, :]) * nd
                          + mask_c[:, None])
                cols_i = np.repeat(d0[p.id] + np.arange(n_free), L2)
                vals_i = np.tile(g, n_free)
                At.add(row + rows_i.ravel(), cols_i, vals_i)
            else:
                for k, (l, c) in enumerate(mask):
                    for s in range(T):
                        if CB[s, l] == 0.0:
                            continue
                        rws = (s * L2 + np.arange(L2)) * nd + c
                        At.add(row + rws, np.full(L2, d0[p.id] + k), g * CB[s, l])
        rhs = np.zeros((T, L2, nd))
        for p in participants:
            if p.G is not None:
                g = flowmap.static_column(p.id)
                rhs -= g[None, :, None] * p.G[:, None, :]
        b_eq_parts.append(rhs.reshape(-1))
        eq_blocks.append(("line_response", row, row + nrows))
        row += nrows

    # local-response match per participant: M_i D_i + V_i = Y_i'S.
    mask_by_c = {}
    for k, (l, c) in enumerate(mask):
        mask_by_c.setdefault(c, ([], []))
        mask_by_c[c][0].append(l)
        mask_by_c[c][1].append(k)
    for p in elastic:
        M, _, _, _, V, kept = blocks[p.id]
        k_i = kept.size
        if k_i == 0:
            continue
        nrows = k_i * nd
        # y coefficients: row (r_idx, c) couples y[c, r] and y[nd+c, r]
        r_idx = np.arange(k_i)
        grid_r = np.repeat(r_idx, nd)
        grid_c = np.tile(np.arange(nd), k_i)
        flat = grid_r * nd + grid_c
        At.add(row + flat, y0[p.id] + grid_c * k_i + grid_r, -np.ones(nrows))
        At.add(row + flat, y0[p.id] + (nd + grid_c) * k_i + grid_r, np.ones(nrows))
        Mk = M[kept]
        for c, (ls, ks) in mask_by_c.items():
            blockM = Mk[:, ls]
            rr, cc2 = np.nonzero(blockM)
            At.add(row + rr * nd + c,
                   d0[p.id] + np.asarray(ks)[cc2], blockM[rr, cc2])
        if V is not None:
            b_eq_parts.append(-V[kept].reshape(-1))
        else:
            b_eq_parts.append(np.zeros(nrows))
        eq_blocks.append((f"local_response:{p.id}", row, row + nrows))
        row += nrows

    m_eq = row
    A_eq = At.matrix((m_eq, n_var))
    b_eq = np.concatenate(b_eq_parts) if b_eq_parts else np.zeros(0)

    # ---- inequalities ----
    It = _Triplets()
    b_in_parts = []
    ineq_blocks = []
    row = 0

    if m_line:
        flows_nom = np.zeros(m_line)
        for p in participants:
            g = flowmap.static_column(p.id)
            nom = p.r.copy()
            if p.elastic:
                nom = nom + blocks[p.id][2]
            flows_nom += np.outer(nom, g).ravel()
        for p in elastic:
            g = flowmap.static_column(p.id)
            CB = blocks[p.id][3]
            if CB is None:
                It.add(row + np.arange(m_line),
                       e0[p.id] + np.repeat(np.arange(T), L2),
                       np.tile(g, T))
            else:
                gam = np.kron(CB, g.reshape(-1, 1))  # (m_line x T)
                It.add_dense(row, e0[p.id], gam)
        rws = np.tile(np.arange(m_line), q)
        cls = z0 + np.repeat(np.arange(q), m_line) * m_line + rws
        It.add(row + rws, cls, np.repeat(h, m_line))
        b_in_parts.append(flowmap.p_bar - flows_nom)
        ineq_blocks.append(("line_limit", row, row + m_line))
        row += m_line

    for p in elastic:
        M, TAx0, _, CB, _, kept = blocks[p.id]
        k_i = kept.size
        if k_i == 0:
            continue
        It.add_dense(row, e0[p.id], M[kept])
        r_idx = np.arange(k_i)
        rws = np.tile(r_idx, q)
        cls = y0[p.id] + np.repeat(np.arange(q), k_i) * k_i + rws
        It.add(row + rws, cls, np.repeat(h, k_i))
        b_in_parts.append(p.local.w[kept] - TAx0[kept])
        ineq_blocks.append((f"local_limit:{p.id}", row, row + k_i))
        row += k_i

    for p in elastic:
        k_i = blocks[p.id][5].size
        ny = q * k_i
        if ny == 0:
            continue
        It.add(row + np.arange(ny), y0[p.id] + np.arange(ny), -np.ones(ny))
        b_in_parts.append(np.zeros(ny))
        ineq_blocks.append((f"nonneg_y:{p.id}", row, row + ny))
        row += ny
    nz = q * m_line
    if nz:
        It.add(row + np.arange(nz), z0 + np.arange(nz), -np.ones(nz))
        b_in_parts.append(np.zeros(nz))
        ineq_blocks.append(("nonneg_z", row, row + nz))
        row += nz

    m_in = row
    A_in = It.matrix((m_in, n_var))
    b_in = np.concatenate(b_in_parts) if b_in_parts else np.zeros(0)

    return RobustProgram(
        P=P, f=f, const=const,
        A_eq=A_eq, b_eq=b_eq, eq_blocks=eq_blocks,
        A_in=A_in, b_in=b_in, ineq_blocks=ineq_blocks,
        T=T, n_delta=n_delta, n_var=n_var,
        elastic_ids=[p.id for p in elastic],
        e_slices={p.id: slice(e0[p.id], e0[p.id] + T) for p in elastic},
        d_slices={p.id: slice(d0[p.id], d0[p.id] + n_free) for p in elastic},
        y_slices={p.id: slice(y0[p.id],
                              y0[p.id] + q * blocks[p.id][5].size)
                  for p in elastic},
        z_slice=slice(z0, n_var),
        free_entries=mask,
        kept_rows={p.id: blocks[p.id][5] for p in elastic},
        participants=participants,
        flowmap=flowmap,
        delta=delta,
        moments=moments,
        band=band,
        regularization=regularization,
        response_rows=response_rows,
    )


def assemble_prescient_program(participants, flowmap, future_delta, x0s=None, *,
                               regularization=1e-8) -> RobustProgram:
    """Deterministic benchmark program with the realized future known.

    The T-step error trajectory is substituted into the inelastic flows and
    the policy reduces to the nominal schedule (no response variables, no
    multiplier blocks).
    """
    participants, elastic, T = _prepare(participants, flowmap, x0s)
    future_delta = np.asarray(future_delta, dtype=float).reshape(-1)
    effective = []
    for p in participants:
        if p.G is not None:
            effective.append(p.with_nominal_flow(p.r + p.G @ future_delta))
        else:
            effective.append(p)
    participants = tuple(effective)
    elastic = [p for p in participants if p.elastic]
    nd = future_delta.size

    blocks = {p.id: _participant_blocks(p) for p in elastic}
    for p in elastic:
        M, TAx0, _, _, _, kept = blocks[p.id]
        _check_skipped_rows(p, M, TAx0, kept)

    e0 = {}
    off = 0
    for p in elastic:
        e0[p.id] = off
        off += T
    n_var = off

    zero_moments = MomentEstimate(
        mean_q=np.zeros(nd), mean_delta=np.zeros(nd),
        second_moment=np.zeros((nd, nd)), n_samples=0)
    Pt = _Triplets()
    f = np.zeros(n_var)
    const = 0.0
    for p in elastic:
        quad = expected_cost_coefficients(p, zero_moments)
        Pt.add_dense(e0[p.id], e0[p.id], quad.P_ee)
        f[e0[p.id]:e0[p.id] + T] = quad.g_e
        const += quad.const
        if regularization:
            idx = np.arange(e0[p.id], e0[p.id] + T)
            Pt.add(idx, idx, np.full(T, regularization))
    P = Pt.matrix((n_var, n_var))

    At = _Triplets()
    rhs = np.zeros(T)
    for p in participants:
        rhs -= p.r
    for p in elastic:
        _, _, CAx0, CB, _, _ = blocks[p.id]
        rhs -= CAx0
        if CB is None:
            At.add(np.arange(T), e0[p.id] + np.arange(T), np.ones(T))
        else:
            At.add_dense(0, e0[p.id], CB)
    A_eq = At.matrix((T, n_var))
    eq_blocks = [("balance_nominal", 0, T)]

    It = _Triplets()
    b_in_parts = []
    ineq_blocks = []
    row = 0
    m_line = flowmap.n_rows
    L2 = flowmap.rows_per_step
    if m_line:
        flows_nom = np.zeros(m_line)
        for p in participants:
            g = flowmap.static_column(p.id)
            nom = p.r.copy()
            if p.elastic:
                nom = nom + blocks[p.id][2]
            flows_nom += np.outer(nom, g).ravel()
        for p in elastic:
            g = flowmap.static_column(p.id)
            CB = blocks[p.id][3]
            if CB is None:
                It.add(row + np.arange(m_line),
                       e0[p.id] + np.repeat(np.arange(T), L2),
                       np.tile(g, T))
            else:
                It.add_dense(row, e0[p.id], np.kron(CB, g.reshape(-1, 1)))
        b_in_parts.append(flowmap.p_bar - flows_nom)
        ineq_blocks.append(("line_limit", row, row + m_line))
        row += m_line
    for p in elastic:
        M, TAx0, _, _, _, kept = blocks[p.id]
        if kept.size == 0:
            continue
        It.add_dense(row, e0[p.id], M[kept])
        b_in_parts.append(p.local.w[kept] - TAx0[kept])
        ineq_blocks.append((f"local_limit:{p.id}", row, row + kept.size))
        row += kept.size
    A_in = It.matrix((row, n_var))
    b_in = np.concatenate(b_in_parts) if b_in_parts else np.zeros(0)

    nd_T = nd // T
    return RobustProgram(
        P=P, f=f, const=const,
        A_eq=A_eq, b_eq=rhs, eq_blocks=eq_blocks,
        A_in=A_in, b_in=b_in, ineq_blocks=ineq_blocks,
        T=T, n_delta=nd_T, n_var=n_var,
        elastic_ids=[p.id for p in elastic],
        e_slices={p.id: slice(e0[p.id], e0[p.id] + T) for p in elastic},
        d_slices={p.id: slice(e0[p.id] + T, e0[p.id] + T) for p in elastic},
        y_slices={p.id: slice(0, 0) for p in elastic},
        z_slice=slice(n_var, n_var),
        free_entries=[],
        kept_rows={p.id: blocks[p.id][5] for p in elastic},
        participants=participants,
        flowmap=flowmap,
        delta=None,
        moments=zero_moments,
        band=None,
        regularization=regularization,
        future_delta=future_delta,
        response_rows=[],
    )


def extract_policies(program: RobustProgram, solution, *, audit_vertices=100,
                     seed=0, balance_tol=1e-6, flow_tol=1e-5,
                     local_tol=1e-5) -> dict:
    """Read the per-participant policies out of a solved program and audit them.

    Masked response entries are exactly zero by construction.  The audit
    replays the policies at sampled vertices of the uncertainty set and
    checks balance, line limits and every local constraint row; failures
    beyond tolerance raise with the offending block label.
    """
    if solution.status != "optimal":
        raise ValidationError(f"cannot extract policies from status {solution.status}")
    x = solution.primal
    T, nd = program.T, program.n_delta * program.T
    policies = {}
    for pid in program.elastic_ids:
        e = np.array(x[program.e_slices[pid]])
        D = np.zeros((T, nd))
        dvals = x[program.d_slices[pid]]
        for k, (l, c) in enumerate(program.free_entries):
            D[l, c] = dvals[k]
        policies[pid] = AffinePolicy(D=D, e=e)
    if audit_vertices:
        _audit_policies(program, policies, audit_vertices, seed,
                        balance_tol, flow_tol, local_tol)
    return policies


def _audit_policies(program, policies, n_vertices, seed,
                    balance_tol, flow_tol, local_tol):
    parts = program.participants
    fm = program.flowmap
    if program.delta is None:
        nd = program.T * program.n_delta
        deltas = np.zeros((1, nd))
    else:
        rng = np.random.default_rng(seed)
        deltas = program.delta.sample_vertices(n_vertices, rng)
    n_nodes = fm.directed_ptdf.shape[1] if fm.n_rows else \
        max(p.node for p in parts) + 1
    for dlt in deltas:
        resid = balance_residual(parts, policies, dlt)
        worst = np.abs(resid).max()
        if worst > balance_tol:
            raise SolverToleranceError(
                f"balance residual {worst:.3e} at an uncertainty vertex",
                block="balance_nominal", violation=worst)
        if fm.n_rows:
            inj = injections_by_node(parts, policies, dlt, n_nodes)
            flows = line_flows(fm, inj)
            over = (flows - fm.p_bar).max()
            if over > flow_tol:
                raise SolverToleranceError(
                    f"line flow exceeds its limit by {over:.3e} at a vertex",
                    block="line_limit", violation=over)
        for p in parts:
            if not p.elastic:
                continue
            pol = policies[p.id]
            u = pol.e + pol.D @ dlt
            xs = p.dynamics.A @ p.x0 + p.dynamics.B @ u
            lhs = p.local.T_mat @ xs + p.local.U_mat @ u
            if p.local.V_mat is not None:
                lhs = lhs + p.local.V_mat @ dlt
            over = (lhs - p.local.w).max()
            if over > local_tol:
                r = int(np.argmax(lhs - p.local.w))
                raise SolverToleranceError(
                    f"participant {p.id} local row {r} violated by {over:.3e}",
                    block=f"local_limit:{p.id}", violation=over)


def dump_program(program, path):
    """Write the assembled QP to a text file for external inspection.

    Format, line oriented, whitespace separated:
      header   ``qp 1 <n_var> <m_eq> <m_in> <const>``
      matrices ``P|A_eq|A_in <nnz>`` followed by one ``row col value`` per entry
      vectors  ``f|b_eq|b_in <n>`` followed by one ``index value`` per nonzero
      labels   ``eq_labels|in_labels <n>`` followed by ``label start stop``
               (half-open row ranges into the preceding constraint matrix)
    P is given in full (both triangles); values use repr-exact floats.
    """
    def mat(fh, name, A):
        A = sp.coo_matrix(A)
        fh.write(f"{name} {A.nnz}\n")
        for r, c, v in zip(A.row, A.col, A.data):
            fh.write(f"{r} {c} {float(v)!r}\n")

    def vec(fh, name, b):
        idx = np.nonzero(b)[0]
        fh.write(f"{name} {idx.size}\n")
        for i in idx:
            fh.write(f"{i} {float(b[i])!r}\n")

    def labels(fh, name, blocks):
        fh.write(f"{name} {len(blocks)}\n")
        for label, start, stop in blocks:
            fh.write(f"{label} {start} {stop}\n")

    def write(fh):
        fh.write(f"qp 1 {program.n_var} {program.b_eq.size} "
                 f"{program.b_in.size} {float(program.const)!r}\n")
        mat(fh, "P", program.P)
        vec(fh, "f", program.f)
        mat(fh, "A_eq", program.A_eq)
        vec(fh, "b_eq", program.b_eq)
        labels(fh, "eq_labels", program.eq_blocks)
        mat(fh, "A_in", program.A_in)
        vec(fh, "b_in", program.b_in)
        labels(fh, "in_labels", program.ineq_blocks)

    if hasattr(path, "write"):
        write(path)
    else:
        with open(path, "w") as fh:
            write(fh)


def load_program_dump(path):
    """Read a dump_program file back into plain arrays.

    Returns a dict with n_var, const, P, f, A_eq, b_eq, eq_blocks, A_in,
    b_in and ineq_blocks; matrices come back as CSR.  Only the numerical
    problem is recovered, not the participant context.
    """
    def read(fh):
        head = fh.readline().split()
        if head[:2] != ["qp", "1"]:
            raise ValidationError(f"not a qp dump: header {head[:2]}")
        n_var, m_eq, m_in = int(head[2]), int(head[3]), int(head[4])
        out = {"n_var": n_var, "const": float(head[5])}
        shapes = {"P": (n_var, n_var), "A_eq": (m_eq, n_var),
                  "A_in": (m_in, n_var)}
        sizes = {"f": n_var, "b_eq": m_eq, "b_in": m_in}
        for name in ("P", "f", "A_eq", "b_eq", "eq_labels",
                     "A_in", "b_in", "in_labels"):
            tag, count = fh.readline().split()
            if tag != name:
                raise ValidationError(f"expected section {name}, got {tag}")
            count = int(count)
            if name in shapes:
                rows, cols, vals = [], [], []
                for _ in range(count):
                    r, c, v = fh.readline().split()
                    rows.append(int(r))
                    cols.append(int(c))
                    vals.append(float(v))
                out[name] = sp.csr_matrix((vals, (rows, cols)),
                                          shape=shapes[name])
            elif name in sizes:
                b = np.zeros(sizes[name])
                for _ in range(count):
                    i, v = fh.readline().split()
                    b[int(i)] = float(v)
                out[name] = b
            else:
                blocks = []
                for _ in range(count):
                    label, start, stop = fh.readline().split()
                    blocks.append((label, int(start), int(stop)))
                key = "eq_blocks" if name == "eq_labels" else "ineq_blocks"
                out[key] = blocks
        return out

    if hasattr(path, "readline"):
        return read(path)
    with open(path) as fh:
        return read(fh)
