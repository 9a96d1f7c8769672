"""Convex QP solving with labelled dual recovery.

    minimize    0.5 x'Px + f'x
    subject to  A_eq x = b_eq        (multipliers y, free)
                A_in x <= b_in       (multipliers z >= 0)

Lagrangian convention: L = 0.5 x'Px + f'x + y'(A_eq x - b_eq) + z'(A_in x - b_in),
so stationarity reads Px + f + A_eq'y + A_in'z = 0.  Multipliers are returned
per labelled constraint block so downstream pricing can address them by name.

The bundled engine is Clarabel: a sparse primal-dual interior-point method
with quasidefinite KKT factorization and Ruiz equilibration, whose duals are
accurate without an active-set cleanup.  Alternative engines can be plugged
in through register_engine as long as they honour the same convention;
kkt_residuals recomputes all optimality residuals from the raw problem data,
independent of any engine's internal bookkeeping.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import NumericalError, ValidationError

__all__ = ["QpSettings", "KktResiduals", "QpSolution", "solve_qp",
           "kkt_residuals", "register_engine"]


@dataclass
class QpSettings:
    """Solver settings; defaults meet the package-wide tolerance contract."""

    tol_feas: float = 1e-8
    tol_gap_abs: float = 1e-8
    tol_gap_rel: float = 1e-8
    max_iter: int = 200
    equilibrate: bool = True
    verbose: bool = False
    engine: str = "clarabel"


@dataclass(frozen=True)
class KktResiduals:
    """Optimality residuals recomputed from raw problem data."""

    stationarity: float
    primal_eq: float
    primal_ineq: float
    complementarity: float
    dual_sign: float  # most negative inequality multiplier (0 if none)

    def max_residual(self):
        return max(self.stationarity, self.primal_eq, self.primal_ineq,
                   self.complementarity, self.dual_sign)


@dataclass
class QpSolution:
    """Primal/dual solution with per-block multiplier access."""

    primal: np.ndarray
    y_eq: np.ndarray
    z_in: np.ndarray
    eq_duals: dict
    ineq_duals: dict
    status: str                      # optimal | infeasible | max_iter
    obj_primal: float
    obj_dual: float
    iterations: int
    solve_time: float
    kkt: KktResiduals | None = None
    message: str = ""
    solver_stats: dict = field(default_factory=dict)

    @property
    def gap(self):
        return abs(self.obj_primal - self.obj_dual)


def _split_blocks(vec, blocks):
    return {label: vec[start:stop] for (label, start, stop) in blocks}


def _most_violated_block(certificate, blocks_eq, blocks_in, m_eq):
    """Name the labelled block carrying the largest certificate mass."""
    best, best_val = "unknown", 0.0
    for label, start, stop in blocks_eq:
        v = np.abs(certificate[start:stop]).max() if stop > start else 0.0
        if v > best_val:
            best, best_val = label, v
    for label, start, stop in blocks_in:
        v = np.abs(certificate[m_eq + start:m_eq + stop]).max() if stop > start else 0.0
        if v > best_val:
            best, best_val = label, v
    return best


def _solve_clarabel(P, f, A_eq, b_eq, A_in, b_in, settings):
    import clarabel

    m_eq = b_eq.size
    m_in = b_in.size
    A = sp.vstack([A_eq, A_in], format="csc") if m_in else A_eq.tocsc()
    b = np.concatenate([b_eq, b_in])
    cones = []
    if m_eq:
        cones.append(clarabel.ZeroConeT(m_eq))
    if m_in:
        cones.append(clarabel.NonnegativeConeT(m_in))
    st = clarabel.DefaultSettings()
    st.verbose = settings.verbose
    st.tol_feas = settings.tol_feas
    st.tol_gap_abs = settings.tol_gap_abs
    st.tol_gap_rel = settings.tol_gap_rel
    st.max_iter = settings.max_iter
    st.equilibrate_enable = settings.equilibrate
    st.max_threads = 1  # deterministic factorization order
    solver = clarabel.DefaultSolver(sp.triu(P, format="csc"), f, A, b, cones, st)
    sol = solver.solve()
    raw = str(sol.status)
    if raw in ("Solved", "AlmostSolved"):
        status = "optimal"
    elif "Infeasible" in raw:
        status = "infeasible"
    elif raw in ("MaxIterations", "MaxTime", "AlmostMaxIterations"):
        status = "max_iter"
    else:
        raise NumericalError(
            f"solver failed with status {raw}",
            report={
                "status": raw,
                "n": f.size, "m_eq": m_eq, "m_in": m_in,
                "norm_P": float(abs(P).max()) if P.nnz else 0.0,
                "norm_f": float(np.abs(f).max()) if f.size else 0.0,
                "norm_A": float(abs(A).max()) if A.nnz else 0.0,
                "norm_b": float(np.abs(b).max()) if b.size else 0.0,
            })
    z = np.asarray(sol.z)
    return {
        "x": np.asarray(sol.x),
        "y_eq": z[:m_eq],
        "z_in": z[m_eq:],
        "status": status,
        "raw_status": raw,
        "obj": float(sol.obj_val),
        "obj_dual": float(sol.obj_val_dual),
        "iterations": int(sol.iterations),
        "solve_time": float(sol.solve_time),
        "r_prim": float(sol.r_prim),
        "r_dual": float(sol.r_dual),
    }


_ENGINES = {"clarabel": _solve_clarabel}


def register_engine(name, fn):
    """Register an alternative QP engine.

    fn(P, f, A_eq, b_eq, A_in, b_in, settings) must return the dict produced
    by the bundled engine (see _solve_clarabel) under the same Lagrangian
    sign convention.
    """
    _ENGINES[name] = fn


def solve_qp(program, settings: QpSettings | None = None) -> QpSolution:
    """Solve a RobustProgram-shaped problem and recover labelled duals.

    `program` needs: P, f, const, A_eq, b_eq, A_in, b_in, eq_blocks,
    ineq_blocks (block = (label, start, stop) in row coordinates).
    status "optimal" guarantees the recomputed KKT residuals are within
    tolerance of the solver's reported accuracy; "infeasible" carries a
    message naming the most-violated labelled block.
    """
    settings = settings or QpSettings()
    if settings.engine not in _ENGINES:
        raise ValidationError(f"unknown engine {settings.engine!r}")
    P = sp.csc_matrix(program.P)
    A_eq = sp.csc_matrix(program.A_eq)
    A_in = sp.csc_matrix(program.A_in)
    f = np.asarray(program.f, dtype=float)
    b_eq = np.asarray(program.b_eq, dtype=float)
    b_in = np.asarray(program.b_in, dtype=float)
    if not np.all(np.isfinite(f)) or not np.all(np.isfinite(b_eq)) \
            or not np.all(np.isfinite(b_in)):
        raise ValidationError("nonfinite entries in problem data")
    t0 = time.perf_counter()
    raw = _ENGINES[settings.engine](P, f, A_eq, b_eq, A_in, b_in, settings)
    wall = time.perf_counter() - t0
    const = float(getattr(program, "const", 0.0))
    solution = QpSolution(
        primal=raw["x"],
        y_eq=raw["y_eq"],
        z_in=raw["z_in"],
        eq_duals=_split_blocks(raw["y_eq"], program.eq_blocks),
        ineq_duals=_split_blocks(raw["z_in"], program.ineq_blocks),
        status=raw["status"],
        obj_primal=raw["obj"] + const,
        obj_dual=raw["obj_dual"] + const,
        iterations=raw["iterations"],
        solve_time=wall,
        solver_stats={k: raw[k] for k in
                      ("raw_status", "r_prim", "r_dual", "solve_time")},
    )
    if raw["status"] == "infeasible":
        cert = np.concatenate([raw["y_eq"], raw["z_in"]])
        block = _most_violated_block(cert, program.eq_blocks,
                                     program.ineq_blocks, b_eq.size)
        solution.message = f"infeasible; dual certificate concentrates on block {block}"
        solution.obj_primal = float("nan")
        solution.obj_dual = float("nan")
    else:
        solution.kkt = kkt_residuals(program, solution)
    return solution


def kkt_residuals(program, solution) -> KktResiduals:
    """Recompute KKT residuals from raw data (independent of the engine)."""
    P = sp.csc_matrix(program.P)
    A_eq = sp.csc_matrix(program.A_eq)
    A_in = sp.csc_matrix(program.A_in)
    x = solution.primal
    y = solution.y_eq
    z = solution.z_in
    r_stat = P @ x + np.asarray(program.f, dtype=float)
    if y.size:
        r_stat = r_stat + A_eq.T @ y
    if z.size:
        r_stat = r_stat + A_in.T @ z
    stationarity = float(np.abs(r_stat).max()) if r_stat.size else 0.0
    pe = A_eq @ x - program.b_eq if y.size else np.zeros(0)
    primal_eq = float(np.abs(pe).max()) if pe.size else 0.0
    if z.size:
        slack = program.b_in - A_in @ x
        primal_ineq = float(np.maximum(-slack, 0.0).max())
        complementarity = float(np.abs(z * slack).max())
        dual_sign = float(max(0.0, -z.min()))
    else:
        primal_ineq = complementarity = dual_sign = 0.0
    return KktResiduals(stationarity=stationarity, primal_eq=primal_eq,
                        primal_ineq=primal_ineq, complementarity=complementarity,
                        dual_sign=dual_sign)
