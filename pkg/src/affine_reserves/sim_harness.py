"""Closed-loop receding-horizon simulation and scheme benchmarking.

Each step re-estimates the forecast moments from the current wind-driver
state, rebuilds the uncertainty set, solves the scheme's program, applies
only the first policy row against the freshly revealed error, then advances
all states.  Near the end of the run no further solves are issued; the last
policies play out their remaining rows against observed errors.

Scheme comparison uses common random numbers: the realized driver path is
generated once per run and shared bitwise across schemes; moment-estimation
streams are seeded per (seed, run, step) so they are scheme-independent too.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError
from .qp_core import QpSettings, solve_qp
from .robust_builder import (assemble_prescient_program, assemble_robust_program,
                             extract_policies)
from .uncertainty import (build_uncertainty_polytope, estimate_moments,
                          simulate_paths)

__all__ = ["Scheme", "SimulationResult", "ExperimentResult", "apply_policy",
           "run_receding_horizon", "run_experiment", "sensitivity_sweep"]

_REALIZATION_STREAM = 0
_MOMENT_STREAM = 1


@dataclass(frozen=True)
class Scheme:
    """Policy structure to benchmark.

    prescient: future known, nominal schedule only (lower bound).
    diagonal:  respond only to the same step's error (flexible-rate analogue).
    banded(k): respond to the last k steps' errors.
    full:      every causal response entry free.
    """

    kind: str
    band_width: int | None = None

    def __post_init__(self):
        if self.kind not in ("prescient", "diagonal", "banded", "full"):
            raise ValidationError(f"unknown scheme kind {self.kind!r}")
        if self.kind == "banded":
            if self.band_width is None or self.band_width < 1:
                raise ValidationError("banded scheme needs a band width >= 1")
        elif self.band_width is not None:
            raise ValidationError(f"band width only applies to banded, not {self.kind}")

    @property
    def label(self):
        if self.kind == "banded":
            return f"banded({self.band_width})"
        return self.kind

    def band(self, T):
        """Mask depth for the assembly; None means every causal entry."""
        if self.kind == "diagonal":
            return 1
        if self.kind == "banded":
            return min(self.band_width, T)
        return None

    @classmethod
    def parse(cls, text):
        text = text.strip()
        if text.startswith("banded(") and text.endswith(")"):
            return cls("banded", int(text[7:-1]))
        if text == "banded":
            return cls("banded", 2)
        return cls(text)


@dataclass
class SimulationResult:
    """One closed-loop run of one scheme."""

    scheme: str
    seed: int
    run_index: int
    n_steps: int
    realized_cost: float
    cost_per_step: np.ndarray
    cost_by_participant: dict
    states: dict
    inputs: dict
    q_path: np.ndarray
    solve_times: list
    n_solves: int
    aborted: bool = False
    abort_reason: str = ""
    abort_step: int | None = None
    max_balance_residual: float = 0.0
    max_flow_excess: float = -np.inf
    max_local_violation: float = -np.inf


def apply_policy(policy, observed_prefix, k):
    """Input at row k of a policy given the errors observed so far.

    observed_prefix stacks the first k+1 error blocks (flattened); only the
    causal entries of row k are read.
    """
    if k >= policy.T:
        raise ValidationError(f"row {k} outside horizon {policy.T}")
    nd = policy.n_delta
    prefix = np.asarray(observed_prefix, dtype=float).reshape(-1)
    need = (k + 1) * nd
    if prefix.size < need:
        raise ValidationError(
            f"need {need} observed error entries for row {k}, got {prefix.size}")
    return float(policy.e[k] + policy.D[k, :need] @ prefix[:need])


def _realization(system, base_seed, run_index, n_steps):
    """Shared realized driver path q(0..n_steps) for one run."""
    ss = np.random.SeedSequence((base_seed, run_index, _REALIZATION_STREAM))
    rng = np.random.default_rng(ss)
    path = simulate_paths(system.q0, system.process, n_steps, 1, rng)[0]
    return np.vstack([np.asarray(system.q0, dtype=float).reshape(1, -1), path])


def _moments_for_step(system, base_seed, run_index, t, q_t, n_mc, cache):
    if cache is not None and t in cache:
        return cache[t]
    ss = np.random.SeedSequence((base_seed, run_index, _MOMENT_STREAM, t))
    rng = np.random.default_rng(ss)
    m = estimate_moments(q_t, system.process, system.T, n_mc, rng)
    if cache is not None:
        cache[t] = m
    return m


def _pin_shifted_rows(program, prev_policies, drift):
    """Equality-pin all but the last policy row to the shifted previous policy.

    Row l of the new policy is fixed to row l+1 of the previous one; response
    entries move one error block left so they keep acting on the same revealed
    errors.  Only the final row stays free.  The nominal pin absorbs what the
    response entries no longer can: the previous frame's first error block is
    now observed, and the remaining blocks are re-centred on fresh forecast
    means.  `drift` stacks those offsets frame-wide (revealed error first,
    then the mean shifts), so e_pin[l] = prev.e[l+1] + prev.D[l+1] @ drift.
    """
    T, nd = program.T, program.n_delta
    drift = np.asarray(drift, dtype=float).reshape(-1)
    pos = {entry: i for i, entry in enumerate(program.free_entries)}
    rows, cols, vals, rhs = [], [], [], []
    r = 0
    for pid in program.elastic_ids:
        prev = prev_policies[pid]
        e_sl = program.e_slices[pid]
        for l in range(T - 1):
            rows.append(r)
            cols.append(e_sl.start + l)
            vals.append(1.0)
            rhs.append(float(prev.e[l + 1] + prev.D[l + 1] @ drift))
            r += 1
        d_sl = program.d_slices.get(pid)
        if d_sl is not None and d_sl.stop > d_sl.start:
            for (l, c), i in pos.items():
                if l > T - 2:
                    continue
                rows.append(r)
                cols.append(d_sl.start + i)
                vals.append(1.0)
                rhs.append(float(prev.D[l + 1, c + nd]))
                r += 1
    if r == 0:
        return program
    A_extra = sp.coo_matrix((vals, (rows, cols)),
                            shape=(r, program.n_var)).tocsr()
    # Balance rows for the committed steps are implied by the pins (they were
    # enforced when the rows were committed); keeping them would duplicate the
    # pins with float drift and stall the solver.  Only the bottom row's
    # balance stays live.
    m_eq = program.b_eq.size
    keep = np.ones(m_eq, dtype=bool)
    for label, s, e in program.eq_blocks:
        if label == "balance_nominal":
            keep[s:s + T - 1] = False
        elif label == "balance_response":
            for j, (l, _c) in enumerate(program.response_rows):
                if l <= T - 2:
                    keep[s + j] = False
    new_blocks = []
    offsets = np.concatenate([[0], np.cumsum(keep)])
    for label, s, e in program.eq_blocks:
        ns, ne = int(offsets[s]), int(offsets[e])
        if ne > ns:
            new_blocks.append((label, ns, ne))
    m_kept = int(keep.sum())
    A_base = sp.csr_matrix(program.A_eq)[keep]
    return replace(
        program,
        A_eq=sp.vstack([A_base, A_extra], format="csr"),
        b_eq=np.concatenate([program.b_eq[keep], np.asarray(rhs)]),
        eq_blocks=new_blocks + [("pinned_policy", m_kept, m_kept + r)])


def _stage_cost(p, x_next, u):
    n = p.dynamics.n
    cost = p.cost
    fx = cost.f_x[:n]
    Hx = cost.H_x[:n, :n]
    fu = cost.f_u[0]
    Hu = cost.H_u[0, 0]
    c = cost.c / p.dynamics.T
    return float(fx @ x_next + 0.5 * x_next @ Hx @ x_next
                 + fu * u + 0.5 * Hu * u * u + c)


def run_receding_horizon(system, scheme: Scheme, base_seed, *, run_index=0,
                         n_steps=None, n_mc=None, settings=None,
                         moments_cache=None, q_path=None,
                         collect_trajectories=True,
                         mode="resolve") -> SimulationResult:
    """Simulate one scheme in closed loop.

    mode selects the re-planning discipline:
      resolve  fresh policies every step (the benchmarked variant); a solve
               is issued at every t <= n_steps - T, then the last policies
               play out their remaining rows.
      batch    solve every T steps and play out each committed policy in
               full before replacing it.
      shift    solve every step but honour the previous commitment: all but
               the last policy row are pinned to the previous policy shifted
               up (and one error block left), so only the final row is new.
               Stated in the current frame's error coordinates.

    An infeasible or failed solve aborts the run and is recorded, not masked.
    """
    n_steps = n_steps or system.sim_steps
    n_mc = n_mc or system.n_mc
    settings = settings or system.solver_settings()
    T = system.T
    nd = system.process.n_delta
    if mode not in ("resolve", "batch", "shift"):
        raise ValidationError(f"unknown replanning mode {mode!r}")
    if n_steps < T:
        raise ValidationError(f"simulation length {n_steps} shorter than horizon {T}")
    if mode == "batch":
        solve_at = set(range(0, n_steps - T + 1, T))
        solve_at.add(n_steps - T)
    else:
        solve_at = None
    if q_path is None:
        q_path = _realization(system, base_seed, run_index, n_steps)
    states = {p.id: np.array(p.x0) for p in system.elastic}
    traj_x = {p.id: [np.array(p.x0)] for p in system.elastic} if collect_trajectories else None
    traj_u = {p.id: [] for p in system.elastic} if collect_trajectories else None
    cost_total = 0.0
    cost_step = np.zeros(n_steps)
    cost_part = {p.id: 0.0 for p in system.elastic}
    solve_times = []
    n_solves = 0
    max_bal = 0.0
    max_flow = -np.inf
    max_local = -np.inf

    frame_policies = None
    frame_mean = None
    frame_t = 0

    result_kwargs = dict(scheme=scheme.label, seed=base_seed, run_index=run_index,
                         n_steps=n_steps, q_path=q_path)

    for t in range(n_steps):
        do_solve = (t <= n_steps - T) if solve_at is None else (t in solve_at)
        if do_solve:
            t0 = time.perf_counter()
            prev_mean = frame_mean
            if scheme.kind == "prescient":
                window = q_path[t + 1:t + 1 + T].reshape(-1)
                parts = system.frame_participants(t, states, window)
                program = assemble_prescient_program(
                    parts, system.flowmap, np.zeros(T * nd))
                frame_mean = window.reshape(T, nd)
            else:
                moments = _moments_for_step(system, base_seed, run_index, t,
                                            q_path[t], n_mc, moments_cache)
                delta = build_uncertainty_polytope(q_path[t], system.process,
                                                   T, moments)
                parts = system.frame_participants(t, states, moments.mean_q)
                program = assemble_robust_program(
                    parts, system.flowmap, delta, moments,
                    band=scheme.band(T))
                frame_mean = moments.mean_q.reshape(T, nd)
            if mode == "shift" and frame_policies is not None:
                drift = np.concatenate([
                    q_path[t] - prev_mean[0],
                    (frame_mean[:-1] - prev_mean[1:]).reshape(-1)])
                program = _pin_shifted_rows(program, frame_policies, drift)
            sol = solve_qp(program, settings)
            solve_times.append(time.perf_counter() - t0)
            n_solves += 1
            if sol.status != "optimal":
                return SimulationResult(
                    realized_cost=float("nan"), cost_per_step=cost_step[:t],
                    cost_by_participant=cost_part,
                    states={k: np.array(v) for k, v in traj_x.items()} if traj_x else {},
                    inputs={k: np.array(v) for k, v in traj_u.items()} if traj_u else {},
                    solve_times=solve_times, n_solves=n_solves,
                    aborted=True, abort_step=t,
                    abort_reason=sol.message or sol.status,
                    **result_kwargs)
            frame_policies = extract_policies(program, sol, audit_vertices=0)
            frame_t = t

        # reveal the error for this interval and apply the policy row
        k = t - frame_t
        prefix = (q_path[frame_t + 1:frame_t + 2 + k] - frame_mean[:k + 1]).reshape(-1)
        injections = np.zeros(system.grid.n_nodes)
        step_cost = 0.0
        for p in system.elastic:
            u = apply_policy(frame_policies[p.id], prefix, k)
            stage = system.stage_dynamics[p.id]
            x_next = stage.A_tilde @ states[p.id] + stage.B_tilde * u
            sc = _stage_cost(p, x_next, u)
            step_cost += sc
            cost_part[p.id] += sc
            states[p.id] = x_next
            injections[p.node] += float(stage.C_tilde @ x_next)
            if collect_trajectories:
                traj_x[p.id].append(x_next)
                traj_u[p.id].append(u)
            lo_x, hi_x, lo_u, hi_u = system.stage_box[p.id]
            viol = max(float(np.max(lo_x - x_next)), float(np.max(x_next - hi_x)),
                       lo_u - u, u - hi_u)
            max_local = max(max_local, viol)
        for lid, node, p_nom in system.loads:
            injections[node] += -p_nom * system.profile_value(t)
        for wid, node, g_row in system.winds:
            injections[node] += float(np.asarray(g_row) @ q_path[t + 1])
        bal = abs(injections.sum())
        max_bal = max(max_bal, bal)
        if system.flowmap.n_rows:
            flows = system.flowmap.directed_ptdf @ injections
            max_flow = max(max_flow, float((flows - system.flowmap.p_bar[
                :system.flowmap.rows_per_step]).max()))
        cost_step[t] = step_cost
        cost_total += step_cost

    return SimulationResult(
        realized_cost=cost_total, cost_per_step=cost_step,
        cost_by_participant=cost_part,
        states={k: np.array(v) for k, v in traj_x.items()} if traj_x else {},
        inputs={k: np.array(v) for k, v in traj_u.items()} if traj_u else {},
        solve_times=solve_times, n_solves=n_solves,
        max_balance_residual=max_bal, max_flow_excess=max_flow,
        max_local_violation=max_local,
        **result_kwargs)


@dataclass
class ExperimentResult:
    """Scheme comparison over common-random-number runs."""

    schemes: list
    n_runs: int
    base_seed: int
    n_steps: int
    results: dict                  # (scheme_label, run) -> SimulationResult
    excluded_runs: list = field(default_factory=list)

    def completed_runs(self):
        runs = []
        for r in range(self.n_runs):
            if r in self.excluded_runs:
                continue
            runs.append(r)
        return runs

    def costs(self, label):
        return np.array([self.results[(label, r)].realized_cost
                         for r in self.completed_runs()])

    def scheme_stats(self, label):
        c = self.costs(label)
        n = len(c)
        return {
            "label": label,
            "runs": n,
            "mean_cost": float(c.mean()) if n else float("nan"),
            "std_cost": float(c.std(ddof=1)) if n > 1 else 0.0,
            "se_cost": float(c.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
            "mean_solve_time": float(np.mean([
                np.mean(self.results[(label, r)].solve_times)
                for r in self.completed_runs()])) if n else float("nan"),
        }

    def reserve_costs(self, label):
        """Per-run cost over the prescient benchmark (paired)."""
        base = self.costs("prescient")
        return self.costs(label) - base

    def reserve_stats(self, label):
        rc = self.reserve_costs(label)
        base = self.costs("prescient")
        n = len(rc)
        return {
            "label": label,
            "mean_reserve_cost": float(rc.mean()) if n else float("nan"),
            "se_reserve_cost": float(rc.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
            "mean_increase_pct": float(100.0 * rc.mean() / base.mean()) if n else float("nan"),
        }

    def reserve_ratio(self, label_a, label_b):
        """Mean reserve cost of scheme a as a fraction of scheme b's."""
        a = self.reserve_costs(label_a).mean()
        b = self.reserve_costs(label_b).mean()
        return float(a / b) if b != 0 else float("nan")


def run_experiment(system, schemes, n_runs, base_seed, *, n_steps=None,
                   n_mc=None, settings=None) -> ExperimentResult:
    """Run all schemes over n_runs common-random-number realizations.

    A run in which any scheme aborts (infeasible solve) is excluded from the
    aggregates and listed in excluded_runs.
    """
    if n_runs < 1:
        raise ValidationError("n_runs must be >= 1")
    schemes = [Scheme.parse(s) if isinstance(s, str) else s for s in schemes]
    n_steps = n_steps or system.sim_steps
    results = {}
    excluded = []
    for r in range(n_runs):
        q_path = _realization(system, base_seed, r, n_steps)
        cache = {}
        aborted = False
        for scheme in schemes:
            res = run_receding_horizon(
                system, scheme, base_seed, run_index=r, n_steps=n_steps,
                n_mc=n_mc, settings=settings, moments_cache=cache,
                q_path=q_path, collect_trajectories=False)
            results[(scheme.label, r)] = res
            aborted = aborted or res.aborted
        if aborted:
            excluded.append(r)
    return ExperimentResult(
        schemes=[s.label for s in schemes], n_runs=n_runs, base_seed=base_seed,
        n_steps=n_steps, results=results, excluded_runs=excluded)


def sensitivity_sweep(system, phi_list, n_runs, base_seed, *, schemes=None,
                      n_steps=None, n_mc=None, settings=None):
    """Rerun the scheme comparison for scaled uncertainty levels.

    Each phi scales the driver capacities and step bounds by phi and the
    covariance by phi^2.  Returns one row dict per phi with the reserve-cost
    percentages and the policy saving; infeasible runs are excluded and
    counted per row.
    """
    schemes = schemes or [Scheme("prescient"), Scheme("diagonal"), Scheme("full")]
    rows = []
    for phi in phi_list:
        scaled = system.scaled(phi)
        exp = run_experiment(scaled, schemes, n_runs, base_seed,
                             n_steps=n_steps, n_mc=n_mc, settings=settings)
        row = {"phi": float(phi),
               "excluded_runs": len(exp.excluded_runs),
               "completed_runs": len(exp.completed_runs())}
        for s in schemes:
            if s.kind == "prescient":
                continue
            st = exp.reserve_stats(s.label)
            row[f"increase_pct[{s.label}]"] = st["mean_increase_pct"]
        labels = [s.label for s in schemes if s.kind != "prescient"]
        if len(labels) >= 2 and row["completed_runs"]:
            a, b = labels[-1], labels[0]
            ratio = exp.reserve_ratio(a, b)
            row["saving_pct"] = 100.0 * (1.0 - ratio)
        rows.append(row)
    return rows
