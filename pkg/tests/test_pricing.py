"""Price extraction, settlement bookkeeping and quote itemization."""
import numpy as np
import pytest

from affine_reserves import (AffinePolicy, Grid, Line, MomentEstimate,
                             UncertaintyPolytope, ValidationError,
                             assemble_robust_program, build_flow_maps,
                             build_load, build_thermal_generator,
                             build_wind_farm, extract_policies, extract_prices,
                             participant_stationarity, per_impulse_quote,
                             per_product_quote, settlement, solve_qp)

from _oracles import THERMAL_STAGE, random_small_instance


@pytest.fixture(scope="module")
def noline():
    rng = np.random.default_rng(41)
    inst = random_small_instance(rng, T=3, with_line=False, with_storage=True)
    program = assemble_robust_program(inst.participants, inst.flowmap,
                                      inst.delta, inst.moments)
    sol = solve_qp(program)
    assert sol.status == "optimal"
    prices = extract_prices(sol, program)
    policies = extract_policies(program, sol, audit_vertices=0)
    return dict(inst=inst, program=program, sol=sol, prices=prices,
                policies=policies)


@pytest.fixture(scope="module")
def single_gen():
    """One generator, flat 70 MW load, 30 MW mean wind, +-10 error box."""
    T = 3
    gen = build_thermal_generator(f_u=12.0, H_u=0.1, alpha=0.0, p_max=400.0,
                                  p_0=40.0, T=T, id="g", node=0)
    load = build_load(1.0, np.full(T, 70.0), id="ld", node=0)
    wind = build_wind_farm(np.array([1.0]), np.full(T, 30.0), T,
                           id="w", node=0)
    parts = [gen, load, wind]
    grid = Grid(n_nodes=2, lines=[Line(0, 1, 0.1, None)])
    flowmap = build_flow_maps(grid, parts, T)
    delta = UncertaintyPolytope.from_bounds(np.full(T, -10.0),
                                            np.full(T, 10.0))
    moments = MomentEstimate(mean_q=np.full(T, 30.0), mean_delta=np.zeros(T),
                             second_moment=25.0 * np.eye(T), n_samples=1000)
    program = assemble_robust_program(parts, flowmap, delta, moments)
    sol = solve_qp(program)
    assert sol.status == "optimal"
    return dict(program=program, sol=sol,
                prices=extract_prices(sol, program),
                policies=extract_policies(program, sol, audit_vertices=0),
                gen=gen, moments=moments)


class TestPriceSet:
    def test_uniform_nodal_price_without_congestion(self, noline):
        prices = noline["prices"]
        ids = list(prices.lam_i)
        base = prices.lam_i[ids[0]]
        for pid in ids[1:]:
            np.testing.assert_allclose(prices.lam_i[pid], base, atol=1e-6)

    def test_shipped_case_uncongested_at_start(self, first_frame):
        prices = extract_prices(first_frame["solution"],
                                first_frame["program"])
        ids = list(prices.lam_i)
        base = prices.lam_i[ids[0]]
        for pid in ids[1:]:
            np.testing.assert_allclose(prices.lam_i[pid], base, atol=1e-6)

    def test_single_generator_marginal_cost(self, single_gen):
        gen = single_gen["gen"]
        e = single_gen["policies"]["g"].e
        np.testing.assert_allclose(e, 40.0, atol=1e-6)
        lam = single_gen["prices"].lam_i["g"]
        np.testing.assert_allclose(lam, 12.0 + 0.1 * e, atol=1e-5)

    def test_single_generator_carries_full_response(self, single_gen):
        D = single_gen["policies"]["g"].D
        np.testing.assert_allclose(np.diag(D), -1.0, atol=1e-6)

    def test_noncausal_policy_prices_zero_filled(self, noline):
        program = noline["program"]
        nd = program.n_delta
        for pid, Pi in noline["prices"].Pi_i.items():
            for l in range(program.T):
                assert not Pi[l, (l + 1) * nd:].any()

    def test_nodal_per_mwh_scales_by_interval(self, noline):
        prices = noline["prices"]
        pid = next(iter(prices.lam_i))
        np.testing.assert_allclose(prices.nodal_per_mwh(pid, 0.25),
                                   prices.lam_i[pid] / 0.25)

    def test_line_limit_duals_nonnegative(self, first_frame):
        prices = extract_prices(first_frame["solution"],
                                first_frame["program"])
        if prices.nu.size:
            assert prices.nu.min() >= -1e-9

    def test_non_optimal_rejected(self, noline):
        import copy
        sick = copy.copy(noline["sol"])
        sick.status = "infeasible"
        with pytest.raises(ValidationError):
            extract_prices(sick, noline["program"])


class TestSettlement:
    def test_zero_response_earns_no_reserve_payment(self, noline):
        program = noline["program"]
        pid = program.elastic_ids[0]
        pol = noline["policies"][pid]
        flat = AffinePolicy(D=np.zeros_like(pol.D), e=pol.e)
        part = next(p for p in program.participants if p.id == pid)
        s = settlement(flat, noline["prices"], part, program.moments)
        assert s.reserve_payment == 0.0
        assert s.power_payment != 0.0

    def test_inelastic_participant_rejected(self, noline):
        program = noline["program"]
        wind = next(p for p in program.participants if not p.elastic)
        pol = next(iter(noline["policies"].values()))
        with pytest.raises(ValidationError):
            settlement(pol, noline["prices"], wind, program.moments)

    def test_profit_identity(self, noline):
        program = noline["program"]
        total_pay, total_cost, total_profit = 0.0, 0.0, 0.0
        for p in program.participants:
            if not p.elastic:
                continue
            s = settlement(noline["policies"][p.id], noline["prices"], p,
                           program.moments)
            total_pay += s.power_payment + s.reserve_payment
            total_cost += s.expected_cost
            total_profit += s.expected_profit
        assert total_profit == pytest.approx(total_pay - total_cost, abs=1e-6)

    def test_quotes_reconcile_with_settlement(self, noline):
        program = noline["program"]
        prices = noline["prices"]
        for p in program.participants:
            if not p.elastic:
                continue
            pol = noline["policies"][p.id]
            s = settlement(pol, prices, p, program.moments)
            row_total = sum(per_product_quote(prices, pol, p.id, l)[2]
                            for l in range(program.T))
            assert row_total == pytest.approx(
                s.power_payment + s.reserve_payment, abs=1e-8)
            col_total = sum(per_impulse_quote(prices, pol, p.id, c)[1]
                            for c in range(program.T * program.n_delta))
            assert col_total == pytest.approx(s.reserve_payment, abs=1e-8)

    def test_row_and_column_readings_agree_per_entry(self, noline):
        program = noline["program"]
        prices = noline["prices"]
        pid = program.elastic_ids[0]
        pol = noline["policies"][pid]
        by_entry = {}
        for l in range(program.T):
            for c, price, qty, val in per_product_quote(prices, pol, pid, l)[1]:
                by_entry[(l, c)] = (price, qty, val)
        for c in range(program.T * program.n_delta):
            for l, price, qty, val in per_impulse_quote(prices, pol, pid, c)[0]:
                assert by_entry[(l, c)] == (price, qty, val)

    def test_diagonal_policy_quotes_one_term_per_row(self):
        rng = np.random.default_rng(43)
        inst = random_small_instance(rng, T=3, with_line=False)
        program = assemble_robust_program(inst.participants, inst.flowmap,
                                          inst.delta, inst.moments, band=1)
        sol = solve_qp(program)
        assert sol.status == "optimal"
        prices = extract_prices(sol, program)
        policies = extract_policies(program, sol, audit_vertices=0)
        nd = program.n_delta
        for pid in program.elastic_ids:
            for l in range(program.T):
                _, terms, _ = per_product_quote(prices, policies[pid], pid, l)
                assert all(l * nd <= c < (l + 1) * nd for c, *_ in terms)

    def test_out_of_range_quotes_rejected(self, noline):
        program = noline["program"]
        pid = program.elastic_ids[0]
        pol = noline["policies"][pid]
        with pytest.raises(ValidationError):
            per_product_quote(noline["prices"], pol, pid, program.T)
        with pytest.raises(ValidationError):
            per_impulse_quote(noline["prices"], pol, pid, -1)


class TestStationarity:
    def test_participants_stationary_at_optimum(self, noline):
        res = participant_stationarity(noline["program"], noline["sol"],
                                       noline["prices"])
        assert set(res) == set(noline["program"].elastic_ids)
        for pid, worst in res.items():
            assert worst <= 1e-5, (pid, worst)

    def test_shipped_case_stationary(self, first_frame):
        prices = extract_prices(first_frame["solution"],
                                first_frame["program"])
        res = participant_stationarity(first_frame["program"],
                                       first_frame["solution"], prices)
        for pid, worst in res.items():
            assert worst <= 1e-5, (pid, worst)

    def test_perturbed_prices_break_stationarity(self, noline):
        prices = noline["prices"]
        bumped = type(prices)(lam=prices.lam + 1.0, Pi=prices.Pi,
                              nu=prices.nu, Psi=prices.Psi,
                              lam_i={k: v - 1.0 for k, v in prices.lam_i.items()},
                              Pi_i=prices.Pi_i)
        res = participant_stationarity(noline["program"], noline["sol"],
                                       bumped)
        assert max(res.values()) >= 0.5
