"""Shared fixtures: the shipped case, a solved first frame, a tiny case."""
import numpy as np
import pytest

from affine_reserves import (assemble_robust_program, build_system,
                             build_uncertainty_polytope, estimate_moments,
                             load_case, shipped_case_path, solve_qp)

TINY_CASE = """\
name: tiny two-node case
network:
  n_nodes: 2
  lines:
    - {from: 1, to: 2, reactance: 0.1, limit_mw: 500}
participants:
  generators:
    - {id: g1, node: 1, f_u: 12.0, H_u: 0.1, alpha: 0.2, p_max: 400.0, p_0: 120.0}
  storage: []
  loads:
    - {id: ld, node: 2, p_nom: 150.0}
uncertainty:
  sigma: [[100.0]]
  beta_bound: [20.0]
  q_min: [0.0]
  q_max: [100.0]
  q0: [50.0]
  n_mc: 1000
  wind:
    - {id: w1, node: 2, g: [1.0]}
simulation:
  horizon: 3
  tau_hours: 0.25
  steps: 6
  runs: 2
  seed: 7
  schemes: [prescient, full]
  phi: [1.0]
  load_profile: [0.8, 0.9, 1.0, 0.95, 0.85, 0.8]
solver:
  tol: 1.0e-8
  max_iter: 200
  engine: clarabel
"""


@pytest.fixture(scope="session")
def case():
    return load_case(shipped_case_path())


@pytest.fixture(scope="session")
def system(case):
    return build_system(case)


@pytest.fixture(scope="session")
def tiny_case_text():
    return TINY_CASE


@pytest.fixture(scope="session")
def tiny_system():
    from affine_reserves import parse_case
    return build_system(parse_case(TINY_CASE, source="<tiny>"))


@pytest.fixture(scope="session")
def first_frame(system):
    """Full-policy robust program for the first frame of the shipped case,
    solved once and shared by the feasibility, pricing and duality tests."""
    rng = np.random.default_rng(np.random.SeedSequence((42, 0, 1, 0)))
    moments = estimate_moments(system.q0, system.process, system.T,
                               system.n_mc, rng)
    delta = build_uncertainty_polytope(system.q0, system.process, system.T,
                                       moments)
    states = {p.id: p.x0 for p in system.elastic}
    parts = system.frame_participants(0, states, moments.mean_q)
    program = assemble_robust_program(parts, system.flowmap, delta, moments)
    solution = solve_qp(program, system.solver_settings())
    assert solution.status == "optimal", solution.message
    return {"program": program, "solution": solution, "moments": moments,
            "delta": delta, "participants": parts}
