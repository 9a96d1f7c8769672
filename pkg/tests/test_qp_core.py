"""QP solve, labelled duals, KKT recomputation and the engine interface."""
import numpy as np
import pytest

from affine_reserves import (QpSettings, ValidationError, kkt_residuals,
                             register_engine, solve_qp)

from _oracles import active_set_qp, plain_program


def test_scalar_bound_constraint():
    """min x^2 subject to x >= 1."""
    prog = plain_program(P=[[2.0]], f=[0.0], A_in=[[-1.0]], b_in=[-1.0])
    sol = solve_qp(prog)
    assert sol.status == "optimal"
    assert sol.primal[0] == pytest.approx(1.0, abs=1e-7)
    assert sol.z_in[0] == pytest.approx(2.0, abs=1e-6)


def test_simplex_projection():
    """min 0.5||x||^2 subject to 1'x = 1 splits evenly; dual is -1/3."""
    prog = plain_program(P=np.eye(3), f=np.zeros(3),
                         A_eq=np.ones((1, 3)), b_eq=[1.0])
    sol = solve_qp(prog)
    np.testing.assert_allclose(sol.primal, np.full(3, 1 / 3), atol=1e-7)
    assert sol.y_eq[0] == pytest.approx(-1 / 3, abs=1e-7)
    assert "eq" in sol.eq_duals


def _random_qp(rng, n):
    W = rng.normal(size=(n, n))
    P = W @ W.T + n * np.eye(n)
    f = rng.normal(scale=2.0, size=n)
    m_eq = int(rng.integers(0, 2))
    A_eq = rng.normal(size=(m_eq, n))
    b_eq = rng.normal(size=m_eq)
    m_in = int(rng.integers(1, 5))
    A_in = rng.normal(size=(m_in, n))
    x_feas = rng.normal(size=n)
    b_in = A_in @ x_feas + rng.uniform(0.1, 2.0, size=m_in)
    if m_eq:
        b_eq = A_eq @ x_feas
    return (P, f, A_eq if m_eq else None, b_eq if m_eq else None, A_in, b_in)


def test_random_qps_match_active_set_oracle():
    rng = np.random.default_rng(17)
    for k in range(30):
        n = int(rng.integers(2, 8))
        P, f, A_eq, b_eq, A_in, b_in = _random_qp(rng, n)
        sol = solve_qp(plain_program(P, f, A_eq, b_eq, A_in, b_in))
        assert sol.status == "optimal"
        x_ref, obj_ref = active_set_qp(P, f, A_eq, b_eq, A_in, b_in)
        np.testing.assert_allclose(sol.primal, x_ref, atol=1e-6)
        obj = 0.5 * sol.primal @ P @ sol.primal + f @ sol.primal
        assert obj == pytest.approx(obj_ref, abs=1e-6)


def test_kkt_residuals_trivial_and_perturbed():
    prog = plain_program(P=[[2.0]], f=[0.0], A_in=[[-1.0]], b_in=[-1.0])
    sol = solve_qp(prog)
    assert sol.kkt.max_residual() <= 1e-7
    sol.primal = sol.primal + 1e-2
    bumped = kkt_residuals(prog, sol)
    assert bumped.stationarity == pytest.approx(2e-2, rel=1e-4)


def test_case_solve_residuals(first_frame):
    res = kkt_residuals(first_frame["program"], first_frame["solution"])
    scale = 1.0 + abs(first_frame["solution"].obj_primal)
    assert res.primal_eq <= 1e-6 * scale
    assert res.primal_ineq <= 1e-6 * scale
    assert res.stationarity <= 1e-6 * scale
    assert res.dual_sign <= 1e-9


def test_duality_gap_contract():
    rng = np.random.default_rng(23)
    P, f, A_eq, b_eq, A_in, b_in = _random_qp(rng, 6)
    sol = solve_qp(plain_program(P, f, A_eq, b_eq, A_in, b_in))
    assert sol.gap <= 1e-6 * (1 + abs(sol.obj_primal))


def test_determinism_repeated_solve():
    rng = np.random.default_rng(29)
    P, f, A_eq, b_eq, A_in, b_in = _random_qp(rng, 10)
    prog = plain_program(P, f, A_eq, b_eq, A_in, b_in)
    a = solve_qp(prog)
    b = solve_qp(prog)
    assert a.status == b.status
    assert np.abs(a.primal - b.primal).max() <= 1e-10


def test_infeasible_names_block():
    # x <= -1 and x >= 1 cannot both hold
    prog = plain_program(P=[[2.0]], f=[0.0],
                         A_in=[[1.0], [-1.0]], b_in=[-1.0, -1.0])
    sol = solve_qp(prog)
    assert sol.status == "infeasible"
    assert "in" in sol.message
    assert np.isnan(sol.obj_primal)


def test_max_iter_status():
    rng = np.random.default_rng(31)
    P, f, A_eq, b_eq, A_in, b_in = _random_qp(rng, 12)
    sol = solve_qp(plain_program(P, f, A_eq, b_eq, A_in, b_in),
                   QpSettings(max_iter=1))
    assert sol.status == "max_iter"


def test_inequality_duals_nonnegative():
    rng = np.random.default_rng(37)
    for _ in range(5):
        P, f, A_eq, b_eq, A_in, b_in = _random_qp(rng, 5)
        sol = solve_qp(plain_program(P, f, A_eq, b_eq, A_in, b_in))
        if sol.z_in.size:
            assert sol.z_in.min() >= -1e-9


def test_nonfinite_data_rejected():
    prog = plain_program(P=[[2.0]], f=[np.inf])
    with pytest.raises(ValidationError):
        solve_qp(prog)


def test_unknown_engine_rejected():
    prog = plain_program(P=[[2.0]], f=[0.0])
    with pytest.raises(ValidationError):
        solve_qp(prog, QpSettings(engine="nope"))


def test_register_engine_round_trip():
    """A custom engine built on the active-set oracle plugs in and returns
    duals under the same sign convention."""
    def oracle_engine(P, f, A_eq, b_eq, A_in, b_in, settings):
        Pd = P.toarray()
        Aeq = A_eq.toarray()
        Ain = A_in.toarray()
        x, obj = active_set_qp(Pd, f, Aeq if b_eq.size else None,
                               b_eq if b_eq.size else None,
                               Ain if b_in.size else None,
                               b_in if b_in.size else None)
        # recover multipliers from stationarity: P x + f + A' [y; z] = 0
        A = np.vstack([Aeq, Ain])
        mult, *_ = np.linalg.lstsq(A.T, -(Pd @ x + f), rcond=None)
        return {"x": x, "y_eq": mult[:b_eq.size], "z_in": mult[b_eq.size:],
                "status": "optimal", "raw_status": "oracle", "obj": obj,
                "obj_dual": obj, "iterations": 1, "solve_time": 0.0,
                "r_prim": 0.0, "r_dual": 0.0}

    register_engine("active-set-oracle", oracle_engine)
    try:
        prog = plain_program(P=np.eye(2), f=[-3.0, 0.0],
                             A_in=[[1.0, 1.0]], b_in=[1.0])
        ref = solve_qp(prog)
        alt = solve_qp(prog, QpSettings(engine="active-set-oracle"))
        assert alt.status == "optimal"
        np.testing.assert_allclose(alt.primal, ref.primal, atol=1e-6)
        assert alt.kkt.stationarity <= 1e-7
    finally:
        from affine_reserves.qp_core import _ENGINES
        _ENGINES.pop("active-set-oracle", None)
