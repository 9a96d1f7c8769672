"""Acceptance gate: the ten package-level checks at their stated tolerances.

Run with `pytest -v tests/test_acceptance.py` to get one verdict line per
criterion; each test also prints its measured values.  The two long checks
(scheme ordering and the uncertainty sweep) simulate the shipped case in
closed loop and take several minutes each.
"""
import copy
import csv
import time

import numpy as np
import pytest

from affine_reserves import (Scheme, assemble_robust_program,
                             build_system, build_thermal_generator,
                             build_storage_unit, build_uncertainty_polytope,
                             estimate_moments, extract_policies,
                             extract_prices, load_case,
                             participant_stationarity, run_experiment,
                             sensitivity_sweep, shipped_case_path, solve_qp)
from affine_reserves.casefile import CaseFile
from affine_reserves.cli import main
from affine_reserves.horizon_model import expected_cost_coefficients

from _oracles import (active_set_qp, mc_policy_cost, plain_program,
                      random_small_instance, vertex_robust_solve)


def _frame_solve(system):
    """First-frame full-policy solve, seeded like the simulation harness."""
    rng = np.random.default_rng(np.random.SeedSequence((42, 0, 1, 0)))
    moments = estimate_moments(system.q0, system.process, system.T,
                               system.n_mc, rng)
    delta = build_uncertainty_polytope(system.q0, system.process, system.T,
                                       moments)
    states = {p.id: p.x0 for p in system.elastic}
    parts = system.frame_participants(0, states, moments.mean_q)
    program = assemble_robust_program(parts, system.flowmap, delta, moments)
    solution = solve_qp(program, system.solver_settings())
    return program, solution


def test_robust_feasibility_at_sampled_vertices(system):
    """Replayed policies respect balance, line and local limits at 1000
    uncertainty-set vertices (1e-6 / 1e-5 / 1e-5, within 60 s)."""
    t0 = time.perf_counter()
    program, solution = _frame_solve(system)
    assert solution.status == "optimal", solution.message
    policies = extract_policies(program, solution, audit_vertices=0)

    T, nd = program.T, program.n_delta * program.T
    rng = np.random.default_rng(2024)
    V = program.delta.sample_vertices(1000, rng)            # (N, nd)

    E_tot = np.zeros(T)
    M_tot = np.zeros((T, nd))
    n_nodes = system.n_nodes
    inj_e = np.zeros((T, n_nodes))
    inj_M = np.zeros((n_nodes, T, nd))
    for p in program.participants:
        node = program.flowmap.node_of[p.id]
        if p.elastic:
            e, D = policies[p.id].e, policies[p.id].D
        else:
            e, D = p.r, (p.G if p.G is not None else np.zeros((T, nd)))
        E_tot += e
        M_tot += D
        inj_e[:, node] += e
        inj_M[node] += D

    balance = E_tot[:, None] + M_tot @ V.T                  # (T, N)
    worst_balance = float(np.abs(balance).max())
    assert worst_balance <= 1e-6

    fm = program.flowmap
    worst_flow = -np.inf
    if fm.n_rows:
        inj_all = inj_e[None, :, :] + np.einsum("vc,ntc->vtn", V, inj_M)
        flows = np.einsum("ln,vtn->vtl", fm.directed_ptdf, inj_all)
        worst_flow = float((flows - fm.p_bar[:fm.rows_per_step]).max())
        assert worst_flow <= 1e-5

    worst_local = -np.inf
    for p in program.participants:
        if not p.elastic:
            continue
        U = policies[p.id].e[:, None] + policies[p.id].D @ V.T
        XS = (p.dynamics.A @ p.x0)[:, None] + p.dynamics.B @ U
        lhs = p.local.T_mat @ XS + p.local.U_mat @ U
        if p.local.V_mat is not None:
            lhs = lhs + p.local.V_mat @ V.T
        worst_local = max(worst_local,
                          float((lhs - p.local.w[:, None]).max()))
    assert worst_local <= 1e-5

    elapsed = time.perf_counter() - t0
    assert elapsed <= 60.0
    print(f"criterion 1: balance {worst_balance:.2e} MW, "
          f"flow excess {worst_flow:.2e} MW, local {worst_local:.2e}, "
          f"{elapsed:.1f} s")


def test_dualized_counterpart_matches_vertex_enumeration():
    """Dualized QP optimum equals the vertex-enumerated optimum within
    1e-5 relative on 50 random small instances, within 30 s total."""
    t0 = time.perf_counter()
    worst = 0.0
    rng = np.random.default_rng(1234)
    for k in range(50):
        inst = random_small_instance(rng)
        program = assemble_robust_program(inst.participants, inst.flowmap,
                                          inst.delta, inst.moments)
        sol = solve_qp(program)
        assert sol.status == "optimal", (k, sol.message)
        ref_obj, _ = vertex_robust_solve(inst)
        rel = abs(sol.obj_primal - ref_obj) / (1.0 + abs(ref_obj))
        worst = max(worst, rel)
        assert rel <= 1e-5, (k, sol.obj_primal, ref_obj)
    elapsed = time.perf_counter() - t0
    assert elapsed <= 30.0
    print(f"criterion 2: 50 instances, worst relative gap {worst:.2e}, "
          f"{elapsed:.1f} s")


def test_direct_feedthrough_identity_for_shipped_archetypes():
    """C B equals the T-step identity exactly for the generator and storage
    archetypes at T in {1, 4, 8, 16}."""
    checked = 0
    for T in (1, 4, 8, 16):
        gen = build_thermal_generator(f_u=10.0, H_u=0.2, alpha=0.3,
                                      p_max=300.0, p_0=100.0, T=T)
        store = build_storage_unit(s_max=120.0, gamma=0.05, p_max=50.0,
                                   s_0=60.0, tau=0.25, T=T)
        for p in (gen, store):
            CB = p.dynamics.C @ p.dynamics.B
            assert np.array_equal(CB, np.eye(T)), (p.id, T)
            checked += 1
    print(f"criterion 3: C B = I_T exact for {checked} archetype/horizon "
          "combinations")


def test_expected_cost_matches_monte_carlo():
    """Closed-form expected cost is within 3 standard errors of a 1e5-sample
    Monte-Carlo estimate on 10 random causal policies."""
    rng = np.random.default_rng(77)
    inst = random_small_instance(rng, T=3, with_storage=True)
    elastic = [p for p in inst.participants if p.elastic]
    M2 = inst.moments.second_moment
    L = np.linalg.cholesky(M2 + 1e-12 * np.eye(M2.shape[0]))
    deltas = rng.normal(size=(100_000, M2.shape[0])) @ L.T
    T, nd = inst.T, inst.nd
    worst_sigmas = 0.0
    for k in range(10):
        p = elastic[k % len(elastic)]
        e = rng.uniform(20.0, 60.0, size=T)
        D = np.zeros((T, T * nd))
        for l in range(T):
            D[l, :(l + 1) * nd] = rng.uniform(-2.0, 2.0, size=(l + 1) * nd)
        analytic = expected_cost_coefficients(p, inst.moments).evaluate(e, D)
        mc_mean, mc_se = mc_policy_cost(inst.stages[p.id], p.cost, p.x0,
                                        e, D, deltas)
        sigmas = abs(analytic - mc_mean) / mc_se
        worst_sigmas = max(worst_sigmas, sigmas)
        assert sigmas <= 3.0, (k, p.id, analytic, mc_mean, mc_se)
    print(f"criterion 4: 10 policies, worst deviation "
          f"{worst_sigmas:.2f} standard errors")


@pytest.fixture(scope="module")
def desk_experiment(system):
    """Shared 10-run x 96-step comparison over the four schemes."""
    schemes = [Scheme.parse(s) for s in
               ("prescient", "diagonal", "banded(2)", "full")]
    t0 = time.perf_counter()
    exp = run_experiment(system, schemes, system.sim_runs, system.base_seed)
    elapsed = time.perf_counter() - t0
    return exp, elapsed


def test_scheme_ordering_and_reserve_cost_band(desk_experiment):
    """Mean realized costs order prescient <= full <= diagonal with at least
    one standard error separating full from diagonal, and the full-policy
    reserve cost lands in [40%, 85%] of the diagonal reserve cost; within
    30 min.  The ordering holds for the means, not run by run: prescient
    clairvoyance spans only the planning window, so its storage moves at
    window edges can lose slightly to a robust policy over a whole episode."""
    exp, elapsed = desk_experiment
    assert not exp.excluded_runs, exp.excluded_runs
    pres, diag, full = (exp.costs(l) for l in ("prescient", "diagonal",
                                               "full"))
    assert pres.mean() <= full.mean() <= diag.mean()
    d = diag - full
    se_diff = d.std(ddof=1) / np.sqrt(len(d))
    assert d.mean() >= se_diff, (d.mean(), se_diff)
    ratio = (full - pres).mean() / (diag - pres).mean()
    assert 0.40 <= ratio <= 0.85, ratio
    assert elapsed <= 1800.0
    above = int(np.sum(pres > full))
    print(f"criterion 5: prescient {pres.mean():.0f} <= full {full.mean():.0f}"
          f" <= diagonal {diag.mean():.0f}; separation "
          f"{d.mean() / se_diff:.1f} SE; full/diagonal reserve ratio "
          f"{ratio:.3f}; prescient above full in {above}/{len(pres)} runs; "
          f"{elapsed:.0f} s")


def test_banded_policy_recovers_most_of_the_saving(desk_experiment):
    """banded(2) keeps at least 60% of the full policy's reserve-cost saving
    over the diagonal scheme, on the same runs."""
    exp, _ = desk_experiment
    pres = exp.costs("prescient")
    reserve = {l: (exp.costs(l) - pres).mean()
               for l in ("diagonal", "banded(2)", "full")}
    saving_full = reserve["diagonal"] - reserve["full"]
    saving_b2 = reserve["diagonal"] - reserve["banded(2)"]
    assert saving_full > 0
    frac = saving_b2 / saving_full
    assert frac >= 0.60, frac
    print(f"criterion 6: banded(2) keeps {100 * frac:.1f}% of the full "
          f"policy's saving ({saving_b2:.0f} of {saving_full:.0f})")


def test_reserve_cost_grows_with_uncertainty_scale(system):
    """Reserve-cost percentage increases strictly in the uncertainty scale
    phi for both policy schemes, and the 1.2/0.4 ratio exceeds 5."""
    t0 = time.perf_counter()
    rows = sensitivity_sweep(system, [0.4, 0.8, 1.2], 5, system.base_seed)
    elapsed = time.perf_counter() - t0
    assert [r["phi"] for r in rows] == [0.4, 0.8, 1.2]
    assert all(r["excluded_runs"] == 0 for r in rows)
    ratios = {}
    for label in ("diagonal", "full"):
        pct = [r[f"increase_pct[{label}]"] for r in rows]
        assert pct[0] < pct[1] < pct[2], (label, pct)
        ratios[label] = pct[2] / pct[0]
        assert ratios[label] > 5.0, (label, pct)
    print(f"criterion 7: increase ratios 1.2/0.4: "
          f"diagonal {ratios['diagonal']:.1f}, full {ratios['full']:.1f}; "
          f"{elapsed:.0f} s")


def test_pricing_consistency_and_congestion(system, case, first_frame):
    """Participants are stationary at the optimum (1e-5); removing line
    limits makes nodal prices uniform (1e-6); tightening line 16-15 to
    280 MW produces a clear nodal price spread."""
    prices = extract_prices(first_frame["solution"], first_frame["program"])
    res = participant_stationarity(first_frame["program"],
                                   first_frame["solution"], prices)
    worst_stat = max(res.values())
    assert worst_stat <= 1e-5, res

    raw = copy.deepcopy(case.raw)
    for ln in raw["network"]["lines"]:
        ln["limit_mw"] = None
    unlimited = build_system(CaseFile(raw=raw, source="<unlimited>"))
    program, solution = _frame_solve(unlimited)
    assert solution.status == "optimal"
    uprices = extract_prices(solution, program)
    lam = np.stack([uprices.lam_i[pid] for pid in program.elastic_ids])
    uniform_spread = float((lam.max(axis=0) - lam.min(axis=0)).max())
    assert uniform_spread <= 1e-6

    raw = copy.deepcopy(case.raw)
    hits = 0
    for ln in raw["network"]["lines"]:
        if {ln["from"], ln["to"]} == {16, 15}:
            # nominal corridor flow is ~320 MW; 280 MW binds but stays
            # robustly feasible
            ln["limit_mw"] = 280.0
            hits += 1
    assert hits == 1
    congested = build_system(CaseFile(raw=raw, source="<congested>"))
    program, solution = _frame_solve(congested)
    assert solution.status == "optimal", solution.message
    cprices = extract_prices(solution, program)
    lam = np.stack([cprices.lam_i[pid] for pid in program.elastic_ids])
    congested_spread = float((lam.max(axis=0) - lam.min(axis=0)).max())
    assert congested_spread > 1e-3
    print(f"criterion 8: stationarity {worst_stat:.2e}, uniform spread "
          f"{uniform_spread:.2e}, congested spread {congested_spread:.2f}")


def test_duality_gap_and_active_set_agreement(first_frame):
    """Case-study duality gap within 1e-6 (1+|primal|); solver matches the
    active-set oracle on random strictly convex QPs."""
    sol = first_frame["solution"]
    bound = 1e-6 * (1.0 + abs(sol.obj_primal))
    assert sol.gap <= bound, (sol.gap, bound)

    rng = np.random.default_rng(4321)
    worst = 0.0
    for _ in range(10):
        n = int(rng.integers(2, 10))
        W = rng.normal(size=(n, n))
        P = W @ W.T + n * np.eye(n)
        f = rng.normal(scale=2.0, size=n)
        m = int(rng.integers(1, 5))
        A = rng.normal(size=(m, n))
        b = A @ rng.normal(size=n) + rng.uniform(0.1, 2.0, size=m)
        qsol = solve_qp(plain_program(P, f, A_in=A, b_in=b))
        assert qsol.status == "optimal"
        x_ref, _ = active_set_qp(P, f, A_in=A, b_in=b)
        worst = max(worst, float(np.abs(qsol.primal - x_ref).max()))
        assert worst <= 1e-6
    print(f"criterion 9: case gap {sol.gap:.2e} (bound {bound:.2e}), "
          f"worst oracle deviation {worst:.2e}")


def test_identical_seeds_give_identical_csv_files(tmp_path):
    """Two consecutive CLI runs with the same seed write byte-identical CSV
    artifacts (reduced scale: 2 runs x 8 steps)."""
    case_path = str(shipped_case_path())
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / f"exp_{tag}"
        code = main(["experiment", case_path, "--runs", "2", "--steps", "8",
                     "--out", str(out)])
        assert code == 0
        outs.append(out)
    compared = []
    for name in ("comparison.csv", "per_run.csv"):
        a = (outs[0] / name).read_bytes()
        b = (outs[1] / name).read_bytes()
        assert a == b, name
        compared.append(name)
    for tag in ("a", "b"):
        out = tmp_path / f"sim_{tag}"
        code = main(["simulate", case_path, "--steps", "8",
                     "--out", str(out)])
        assert code == 0
    a = (tmp_path / "sim_a" / "trace.csv").read_bytes()
    assert a == (tmp_path / "sim_b" / "trace.csv").read_bytes()
    compared.append("trace.csv")
    print(f"criterion 10: byte-identical across repeat runs: "
          f"{', '.join(compared)}")
