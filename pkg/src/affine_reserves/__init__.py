"""Affine reserve policies for power systems under forecast uncertainty.

Computes optimal affine disturbance-feedback policies (nominal schedule plus
causal linear response to forecast errors) for networked participants with
quadratic costs, by dualizing the robust constraints into a single sparse QP.
Duals price both energy and the policy entries themselves; a receding-horizon
harness benchmarks policy structures on common random realizations.
"""

__version__ = "0.1.0"

from .casefile import (CaseFile, System, build_system, load_case, parse_case,
                       shipped_case_path)
from .errors import (AffineReservesError, InfeasibleModelError, NumericalError,
                     SolverToleranceError, ValidationError)
from .horizon_model import (LocalPolytope, Participant, PolicyQuadratic,
                            QuadraticCost, StackedDynamics, StageDynamics,
                            build_load, build_storage_unit,
                            build_thermal_generator, build_wind_farm,
                            expected_cost_coefficients, stack_dynamics,
                            verify_direct_feedthrough)
from .network import (FlowMap, Grid, Line, balance_residual, build_flow_maps,
                      injections_by_node, line_flows, ptdf_matrix)
from .pricing import (PriceSet, Settlement, extract_prices,
                      participant_stationarity, per_impulse_quote,
                      per_product_quote, settlement)
from .qp_core import (KktResiduals, QpSettings, QpSolution, kkt_residuals,
                      register_engine, solve_qp)
from .robust_builder import (AffinePolicy, RobustProgram,
                             assemble_prescient_program,
                             assemble_robust_program, causality_mask,
                             dualize_row, dump_program, extract_policies)
from .sim_harness import (ExperimentResult, Scheme, SimulationResult,
                          apply_policy, run_experiment, run_receding_horizon,
                          sensitivity_sweep)
from .uncertainty import (MomentEstimate, ProcessModel, UncertaintyPolytope,
                          build_uncertainty_polytope, estimate_moments,
                          sample_beta, simulate_paths, step_process)

__all__ = [
    "AffinePolicy", "AffineReservesError", "CaseFile", "ExperimentResult",
    "FlowMap", "Grid", "InfeasibleModelError", "KktResiduals", "Line",
    "LocalPolytope", "MomentEstimate", "NumericalError", "Participant",
    "PolicyQuadratic", "PriceSet", "ProcessModel", "QpSettings", "QpSolution",
    "QuadraticCost", "RobustProgram", "Scheme", "Settlement",
    "SimulationResult", "SolverToleranceError", "StackedDynamics",
    "StageDynamics", "System", "UncertaintyPolytope", "ValidationError",
    "apply_policy", "assemble_prescient_program", "assemble_robust_program",
    "balance_residual", "build_flow_maps", "build_load",
    "build_storage_unit", "build_system", "build_thermal_generator",
    "build_uncertainty_polytope", "build_wind_farm", "causality_mask",
    "dualize_row", "estimate_moments", "expected_cost_coefficients",
    "injections_by_node",
    "dump_program",
    "extract_policies", "extract_prices", "kkt_residuals", "line_flows",
    "load_case", "parse_case", "participant_stationarity", "per_impulse_quote",
    "per_product_quote", "ptdf_matrix", "register_engine",
    "run_experiment", "run_receding_horizon", "sample_beta",
    "sensitivity_sweep", "settlement", "shipped_case_path",
    "simulate_paths", "solve_qp", "stack_dynamics", "step_process",
    "verify_direct_feedthrough",
]
