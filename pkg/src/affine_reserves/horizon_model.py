"""Finite-horizon participant models.

A participant is a stacked LTI system over a horizon of T trading intervals,
with a convex quadratic cost on states and inputs and a polytopic set of
permissible state/input trajectories.  Purely inelastic participants (loads,
uncurtailed wind) carry only their exogenous injection data.

Conventions
-----------
* The scalar input u_k is the participant's controllable net injection set
  during interval k; the first state of x_{k+1} equals that injection.
* Stacked vectors run step-major: x = (x_1, ..., x_T), u = (u_0, ..., u_{T-1}).
* The forecast-error vector delta has dimension N_delta*T, step-major, so the
  block for step k occupies entries [k*N_delta, (k+1)*N_delta).
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError
from .polytopes import is_bounded

__all__ = [
    "StageDynamics", "StackedDynamics", "QuadraticCost", "LocalPolytope",
    "Participant", "PolicyQuadratic",
    "stack_dynamics", "verify_direct_feedthrough",
    "build_thermal_generator", "build_storage_unit", "build_load",
    "build_wind_farm", "expected_cost_coefficients",
]


def _as_matrix(x, name):
    m = np.atleast_2d(np.asarray(x, dtype=float))
    if m.ndim != 2:
        raise ValidationError(f"{name} must be 2-dimensional")
    return m


@dataclass(frozen=True)
class StageDynamics:
    """Single-stage dynamics x+ = A_tilde x + B_tilde u, injection = C_tilde x.

    The standard participant form has C_tilde = [1, 0, ...], a zero first row
    of A_tilde and [B_tilde]_0 = 1, which makes the stacked map from inputs to
    injections the identity (see verify_direct_feedthrough).  Construction
    checks dimensions only, so deliberately nonstandard stages can be built
    and probed.
    """

    A_tilde: np.ndarray
    B_tilde: np.ndarray
    C_tilde: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A_tilde, "A_tilde")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValidationError(f"A_tilde must be square, got {A.shape}")
        B = np.asarray(self.B_tilde, dtype=float).reshape(-1)
        if B.shape != (n,):
            raise ValidationError(
                f"B_tilde must have {n} entries (single input), got {B.shape}")
        C = np.asarray(self.C_tilde, dtype=float).reshape(-1)
        if C.shape != (n,):
            raise ValidationError(f"C_tilde must have {n} entries, got {C.shape}")
        object.__setattr__(self, "A_tilde", A)
        object.__setattr__(self, "B_tilde", B)
        object.__setattr__(self, "C_tilde", C)

    @property
    def n(self):
        return self.A_tilde.shape[0]


@dataclass(frozen=True)
class StackedDynamics:
    """Horizon-stacked dynamics: x = A x0 + B u, injections = C x.

    A is (n*T, n), B is (n*T, T) block-lower-triangular with block (k, j)
    equal to A_tilde^(k-j) B_tilde for j <= k, and C = I_T kron C_tilde.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    T: int
    n: int


def stack_dynamics(stage: StageDynamics, T: int) -> StackedDynamics:
    """Stack single-stage dynamics over a T-step horizon."""
    if T < 1:
        raise ValidationError(f"horizon must be >= 1, got {T}")
    n = stage.n
    At, Bt = stage.A_tilde, stage.B_tilde
    # powers[m] = A_tilde^m
    powers = [np.eye(n)]
    for _ in range(T):
        powers.append(At @ powers[-1])
    A = np.vstack([powers[k + 1] for k in range(T)])
    B = np.zeros((n * T, T))
    for k in range(T):
        for j in range(k + 1):
            B[k * n:(k + 1) * n, j] = powers[k - j] @ Bt
    C = np.kron(np.eye(T), stage.C_tilde.reshape(1, -1))
    return StackedDynamics(A=A, B=B, C=C, T=T, n=n)


def verify_direct_feedthrough(dyn: StackedDynamics) -> bool:
    """True iff the stacked input-to-injection map C @ B is the identity.

    Holds whenever the stage has a zero first row of A_tilde, [B_tilde]_0 = 1
    and C_tilde selecting the first state; lets the balance constraints use
    the identity shortcut.
    """
    CB = dyn.C @ dyn.B
    return bool(np.max(np.abs(CB - np.eye(dyn.T))) <= 1e-12)


@dataclass(frozen=True)
class QuadraticCost:
    """Horizon cost f_x'x + 0.5 x'H_x x + f_u'u + 0.5 u'H_u u + c."""

    f_x: np.ndarray
    H_x: np.ndarray
    f_u: np.ndarray
    H_u: np.ndarray
    c: float

    def __post_init__(self):
        for name in ("H_x", "H_u"):
            H = _as_matrix(getattr(self, name), name)
            _check_psd(H, name)
            object.__setattr__(self, name, 0.5 * (H + H.T))
        object.__setattr__(self, "f_x", np.asarray(self.f_x, dtype=float).reshape(-1))
        object.__setattr__(self, "f_u", np.asarray(self.f_u, dtype=float).reshape(-1))

    def evaluate(self, x, u):
        x = np.asarray(x, dtype=float).reshape(-1)
        u = np.asarray(u, dtype=float).reshape(-1)
        return float(self.f_x @ x + 0.5 * x @ self.H_x @ x
                     + self.f_u @ u + 0.5 * u @ self.H_u @ u + self.c)


def _check_psd(H, name):
    if not np.allclose(H, H.T, atol=1e-8 * (1 + np.abs(H).max())):
        raise ValidationError(f"{name} must be symmetric")
    w = np.linalg.eigvalsh(0.5 * (H + H.T))
    scale = max(1.0, abs(w[-1]))
    if w[0] < -1e-9 * scale:
        raise ValidationError(f"{name} is not PSD (min eigenvalue {w[0]:.3e})")


@dataclass(frozen=True)
class LocalPolytope:
    """Permissible trajectories: T_mat x + U_mat u + V_mat delta <= w.

    V_mat is None for participants whose constraints do not couple to the
    forecast error (all shipped archetypes).
    """

    T_mat: np.ndarray
    U_mat: np.ndarray
    w: np.ndarray
    V_mat: np.ndarray | None = None

    def __post_init__(self):
        Tm = _as_matrix(self.T_mat, "T_mat")
        Um = _as_matrix(self.U_mat, "U_mat")
        w = np.asarray(self.w, dtype=float).reshape(-1)
        if Tm.shape[0] != Um.shape[0] or Tm.shape[0] != w.size:
            raise ValidationError("local polytope row counts disagree")
        object.__setattr__(self, "T_mat", Tm)
        object.__setattr__(self, "U_mat", Um)
        object.__setattr__(self, "w", w)
        if self.V_mat is not None:
            Vm = _as_matrix(self.V_mat, "V_mat")
            if Vm.shape[0] != w.size:
                raise ValidationError("V_mat row count disagrees")
            object.__setattr__(self, "V_mat", Vm)

    @property
    def n_rows(self):
        return self.w.size


@dataclass(frozen=True)
class Participant:
    """One market participant.

    Elastic participants (generators, storage) carry dynamics, cost, local
    polytope and current state x0.  Purely inelastic participants carry only
    the nominal injection r and, for wind, the error-to-injection map G.
    """

    id: str
    node: int
    r: np.ndarray
    G: np.ndarray | None = None
    dynamics: StackedDynamics | None = None
    cost: QuadraticCost | None = None
    local: LocalPolytope | None = None
    x0: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "r", np.asarray(self.r, dtype=float).reshape(-1))
        if self.G is not None:
            object.__setattr__(self, "G", _as_matrix(self.G, "G"))
        if self.x0 is not None:
            object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(-1))
        elastic_fields = (self.dynamics, self.cost, self.local, self.x0)
        if any(f is not None for f in elastic_fields) and not all(
                f is not None for f in elastic_fields):
            raise ValidationError(
                f"participant {self.id}: elastic participants need dynamics, "
                "cost, local polytope and x0 together")

    @property
    def elastic(self):
        return self.dynamics is not None

    @property
    def T(self):
        return self.r.size if self.dynamics is None else self.dynamics.T

    def with_state(self, x0, r=None):
        """Copy with an updated current state (and optionally nominal flow)."""
        new = replace(self, x0=np.asarray(x0, dtype=float).reshape(-1))
        if r is not None:
            new = replace(new, r=np.asarray(r, dtype=float).reshape(-1))
        return new

    def with_nominal_flow(self, r):
        return replace(self, r=np.asarray(r, dtype=float).reshape(-1))


def _assert_compact(T_mat, U_mat, name):
    M = np.hstack([T_mat, U_mat])
    if not is_bounded(M):
        raise ValidationError(f"{name}: local constraint set is unbounded")


def build_thermal_generator(f_u, H_u, alpha, p_max, p_0, T,
                            *, id="gen", node=0) -> Participant:
    """Thermal generator archetype.

    Two states: current injection and previous injection; a ramping penalty
    0.5*alpha*(p_k - p_{k-1})^2 couples them.  Injection, both states and the
    input are box-constrained to [0, p_max] at every step.
    """
    if p_max <= 0:
        raise ValidationError(f"{id}: p_max must be positive")
    if not (0 <= p_0 <= p_max):
        raise ValidationError(f"{id}: p_0 must lie in [0, p_max]")
    if alpha < 0 or H_u < 0:
        raise ValidationError(f"{id}: negative cost curvature")
    stage = StageDynamics(
        A_tilde=np.array([[0.0, 0.0], [1.0, 0.0]]),
        B_tilde=np.array([1.0, 0.0]),
        C_tilde=np.array([1.0, 0.0]),
    )
    dyn = stack_dynamics(stage, T)
    Hx_stage = alpha * np.array([[1.0, -1.0], [-1.0, 1.0]])
    cost = QuadraticCost(
        f_x=np.zeros(2 * T),
        H_x=np.kron(np.eye(T), Hx_stage),
        f_u=np.full(T, float(f_u)),
        H_u=float(H_u) * np.eye(T),
        c=0.0,
    )
    # Upper and lower bounds on both states and the input, per step.
    n = 2
    rows = []
    w = []
    for k in range(T):
        for s in range(n):
            e = np.zeros(n * T)
            e[k * n + s] = 1.0
            rows.append((e, np.zeros(T), p_max))
            rows.append((-e, np.zeros(T), 0.0))
        eu = np.zeros(T)
        eu[k] = 1.0
        rows.append((np.zeros(n * T), eu, p_max))
        rows.append((np.zeros(n * T), -eu, 0.0))
    T_mat = np.array([r[0] for r in rows])
    U_mat = np.array([r[1] for r in rows])
    w = np.array([r[2] for r in rows])
    _assert_compact(T_mat, U_mat, id)
    return Participant(
        id=id, node=node, r=np.zeros(T), dynamics=dyn, cost=cost,
        local=LocalPolytope(T_mat=T_mat, U_mat=U_mat, w=w),
        x0=np.array([float(p_0), float(p_0)]),
    )


def build_storage_unit(s_max, gamma, p_max, s_0, tau, T,
                       *, id="storage", node=0) -> Participant:
    """Storage archetype.

    Three states: injection, previous injection, stored energy.  The level
    integrates -tau * injection; a quadratic penalty gamma*(s - s_max/2)^2
    keeps the level near the midpoint.  Injection is bounded by +-p_max and
    the level by [0, s_max].
    """
    if tau <= 0:
        raise ValidationError(f"{id}: tau must be positive")
    if not (0 <= s_0 <= s_max):
        raise ValidationError(f"{id}: s_0 must lie in [0, s_max]")
    if gamma < 0:
        raise ValidationError(f"{id}: negative cost curvature")
    stage = StageDynamics(
        A_tilde=np.array([[0.0, 0.0, 0.0],
                          [1.0, 0.0, 0.0],
                          [0.0, 0.0, 1.0]]),
        B_tilde=np.array([1.0, 0.0, -float(tau)]),
        C_tilde=np.array([1.0, 0.0, 0.0]),
    )
    dyn = stack_dynamics(stage, T)
    mid = s_max / 2.0
    fx_stage = np.array([0.0, 0.0, -2.0 * gamma * mid])
    Hx_stage = np.diag([0.0, 0.0, 2.0 * gamma])
    cost = QuadraticCost(
        f_x=np.tile(fx_stage, T),
        H_x=np.kron(np.eye(T), Hx_stage),
        f_u=np.zeros(T),
        H_u=np.zeros((T, T)),
        c=T * gamma * mid ** 2,
    )
    n = 3
    rows = []
    for k in range(T):
        for s, (lo, hi) in enumerate([(-p_max, p_max), (-p_max, p_max),
                                      (0.0, s_max)]):
            e = np.zeros(n * T)
            e[k * n + s] = 1.0
            rows.append((e, np.zeros(T), hi))
            rows.append((-e, np.zeros(T), -lo))
        eu = np.zeros(T)
        eu[k] = 1.0
        rows.append((np.zeros(n * T), eu, p_max))
        rows.append((np.zeros(n * T), -eu, p_max))
    T_mat = np.array([r[0] for r in rows])
    U_mat = np.array([r[1] for r in rows])
    w = np.array([r[2] for r in rows])
    _assert_compact(T_mat, U_mat, id)
    return Participant(
        id=id, node=node, r=np.zeros(T), dynamics=dyn, cost=cost,
        local=LocalPolytope(T_mat=T_mat, U_mat=U_mat, w=w),
        x0=np.array([0.0, 0.0, float(s_0)]),
    )


def build_load(p_nom, profile, *, id="load", node=0) -> Participant:
    """Inelastic load drawing p_nom * profile[k] at step k (injection is negative)."""
    profile = np.asarray(profile, dtype=float).reshape(-1)
    if p_nom < 0:
        raise ValidationError(f"{id}: p_nom must be nonnegative")
    return Participant(id=id, node=node, r=-float(p_nom) * profile)


def build_wind_farm(g_row, mean_q, T, *, id="wind", node=0) -> Participant:
    """Inelastic wind farm.

    g_row maps the driver vector q_k to injected power at step k; the
    injection over the horizon is G (mean_q + delta) with G = I_T kron g_row.
    """
    g = np.asarray(g_row, dtype=float).reshape(1, -1)
    mean_q = np.asarray(mean_q, dtype=float).reshape(-1)
    if mean_q.size != g.size * T:
        raise ValidationError(
            f"{id}: mean_q must have {g.size * T} entries, got {mean_q.size}")
    G = np.kron(np.eye(T), g)
    return Participant(id=id, node=node, r=G @ mean_q, G=G)


@dataclass(frozen=True)
class PolicyQuadratic:
    """Expected cost of an affine policy u = D delta + e, as a quadratic form.

    Over the variables (e, vec(D)) with vec row-major:
        E[J] = const + g_e'e + g_d'vec(D)
               + 0.5 e'P_ee e + e'P_ed vec(D) + 0.5 vec(D)'P_dd vec(D)
    P_dd is the Kronecker product of the input-space Hessian with E[dd'];
    g_d and P_ed vanish when E[delta] = 0.
    """

    P_ee: np.ndarray
    P_ed: np.ndarray
    P_dd: np.ndarray
    g_e: np.ndarray
    g_d: np.ndarray
    const: float
    T: int
    n_delta_T: int

    def evaluate(self, e, D):
        e = np.asarray(e, dtype=float).reshape(-1)
        d = np.asarray(D, dtype=float).reshape(-1)
        return float(self.const + self.g_e @ e + self.g_d @ d
                     + 0.5 * e @ self.P_ee @ e + e @ self.P_ed @ d
                     + 0.5 * d @ self.P_dd @ d)


def expected_cost_coefficients(p: Participant, moments) -> PolicyQuadratic:
    """Expand the expected horizon cost of participant p under an affine policy.

    With x = A x0 + B (D delta + e) and the first two moments of delta given,
    the expectation is exactly quadratic in (e, D); the D-quadratic carries
    the second moment E[delta delta'] as a weight.
    """
    if not p.elastic:
        raise ValidationError(f"participant {p.id} is inelastic; no cost to expand")
    dyn, cost = p.dynamics, p.cost
    mu = np.asarray(moments.mean_delta, dtype=float).reshape(-1)
    M2 = np.asarray(moments.second_moment, dtype=float)
    ndT = mu.size
    if M2.shape != (ndT, ndT):
        raise ValidationError("second_moment shape disagrees with mean_delta")
    _check_psd(M2, "second_moment")
    A, B, T = dyn.A, dyn.B, dyn.T
    x0 = p.x0
    Ax0 = A @ x0
    Hq = B.T @ cost.H_x @ B + cost.H_u          # input-space Hessian
    g = B.T @ cost.f_x + cost.f_u + B.T @ (cost.H_x @ Ax0)
    const = cost.c + cost.f_x @ Ax0 + 0.5 * Ax0 @ cost.H_x @ Ax0
    M2s = 0.5 * (M2 + M2.T)
    P_dd = np.kron(Hq, M2s)
    # Cross and linear D terms carry E[delta]; zero under centred moments.
    if np.any(mu != 0.0):
        g_d = np.kron(g, mu)
        P_ed = np.kron(Hq, mu.reshape(1, -1))
    else:
        g_d = np.zeros(T * ndT)
        P_ed = np.zeros((T, T * ndT))
    return PolicyQuadratic(P_ee=Hq, P_ed=P_ed, P_dd=P_dd, g_e=g, g_d=g_d,
                           const=float(const), T=T, n_delta_T=ndT)
