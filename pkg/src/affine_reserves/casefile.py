"""Case-file ingestion and system assembly.

A case is a single YAML document with four sections: network, participants,
uncertainty, simulation, solver.  Node numbers in the file are 1-based, as
in the usual bus-numbering convention; everything internal is 0-based.
`load_case` schema-validates and cross-checks the document, `build_system`
turns it into the in-memory System the simulator and CLI operate on.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml
from jsonschema import Draft202012Validator

from .errors import ValidationError
from .horizon_model import (StageDynamics, build_load, build_storage_unit,
                            build_thermal_generator, build_wind_farm)
from .network import Grid, Line, build_flow_maps
from .qp_core import QpSettings
from .uncertainty import ProcessModel

__all__ = ["CaseFile", "System", "load_case", "parse_case", "build_system",
           "shipped_case_path"]


def _schema():
    text = resources.files("affine_reserves").joinpath(
        "data/case_schema.json").read_text()
    return json.loads(text)


def shipped_case_path() -> Path:
    """Filesystem path of the bundled 39-bus case."""
    return Path(str(resources.files("affine_reserves").joinpath(
        "data/case39.yaml")))


@dataclass(frozen=True)
class CaseFile:
    """Validated case document plus its provenance."""

    raw: dict
    source: str = "<memory>"

    def canonical(self) -> str:
        """Canonical serialization; load -> canonical -> load is idempotent."""
        return yaml.safe_dump(self.raw, sort_keys=True,
                              default_flow_style=False)

    def content_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def section(self, name):
        return self.raw[name]


def parse_case(text: str, source: str = "<string>") -> CaseFile:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = (f" at line {mark.line + 1}, column {mark.column + 1}"
                 if mark is not None else "")
        raise ValidationError(f"{source}: parse error{where}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValidationError(f"{source}: case document must be a mapping")
    _validate(raw, source)
    return CaseFile(raw=raw, source=source)


def load_case(path) -> CaseFile:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"case file not found: {path}")
    return parse_case(path.read_text(), source=str(path))


def _validate(raw, source):
    validator = Draft202012Validator(_schema())
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.path))
    if errors:
        e = errors[0]
        where = ".".join(str(p) for p in e.path) or "<root>"
        raise ValidationError(f"{source}: schema error at {where}: {e.message}",
                              key=where)
    _cross_check(raw, source)


def _fail(source, key, msg):
    raise ValidationError(f"{source}: {key}: {msg}", key=key)


def _cross_check(raw, source):
    net = raw["network"]
    n_nodes = net["n_nodes"]
    seen_pairs = set()
    for i, ln in enumerate(net["lines"]):
        key = f"network.lines[{i}]"
        for end in ("from", "to"):
            if not (1 <= ln[end] <= n_nodes):
                _fail(source, f"{key}.{end}",
                      f"node {ln[end]} outside 1..{n_nodes}")
        if ln["from"] == ln["to"]:
            _fail(source, key, "line endpoints coincide")
        pair = frozenset((ln["from"], ln["to"]))
        if pair in seen_pairs:
            _fail(source, key, "duplicate line between the same nodes")
        seen_pairs.add(pair)

    parts = raw["participants"]
    unc = raw["uncertainty"]
    ids = []
    for group, entries in (("generators", parts["generators"]),
                           ("storage", parts["storage"]),
                           ("loads", parts["loads"]),
                           ("wind", unc["wind"])):
        prefix = ("uncertainty.wind" if group == "wind"
                  else f"participants.{group}")
        for i, entry in enumerate(entries):
            key = f"{prefix}[{i}]"
            ids.append((entry["id"], key))
            if not (1 <= entry["node"] <= n_nodes):
                _fail(source, f"{key}.node",
                      f"node {entry['node']} does not exist "
                      f"(network has {n_nodes} nodes)")
    names = [i for i, _ in ids]
    if len(set(names)) != len(names):
        dup = next(n for n in names if names.count(n) > 1)
        _fail(source, "participants", f"duplicate participant id {dup!r}")

    for i, g in enumerate(parts["generators"]):
        key = f"participants.generators[{i}]"
        if g["p_max"] <= 0:
            _fail(source, f"{key}.p_max", "must be positive")
        if not (0 <= g["p_0"] <= g["p_max"]):
            _fail(source, f"{key}.p_0",
                  f"initial output {g['p_0']} outside [0, {g['p_max']}]")
    for i, s in enumerate(parts["storage"]):
        key = f"participants.storage[{i}]"
        if s["s_max"] <= 0 or s["p_max"] <= 0:
            _fail(source, key, "s_max and p_max must be positive")
        if not (0 <= s["s_0"] <= s["s_max"]):
            _fail(source, f"{key}.s_0",
                  f"initial level {s['s_0']} outside [0, {s['s_max']}]")

    nd = len(unc["sigma"])
    for row_i, row in enumerate(unc["sigma"]):
        if len(row) != nd:
            _fail(source, f"uncertainty.sigma[{row_i}]",
                  f"sigma must be square ({nd}x{nd})")
    for name in ("beta_bound", "q_min", "q_max", "q0"):
        if len(unc[name]) != nd:
            _fail(source, f"uncertainty.{name}",
                  f"needs {nd} entries to match sigma")
    for i, w in enumerate(unc["wind"]):
        if len(w["g"]) != nd:
            _fail(source, f"uncertainty.wind[{i}].g",
                  f"needs {nd} entries to match sigma")
    for c in range(nd):
        if not (unc["q_min"][c] <= unc["q0"][c] <= unc["q_max"][c]):
            _fail(source, "uncertainty.q0",
                  f"component {c} outside [q_min, q_max]")
        if unc["q_min"][c] >= unc["q_max"][c]:
            _fail(source, "uncertainty.q_min", "q_min must be < q_max")
        if unc["beta_bound"][c] <= 0:
            _fail(source, "uncertainty.beta_bound", "bounds must be positive")

    sim = raw["simulation"]
    if sim["steps"] < sim["horizon"]:
        _fail(source, "simulation.steps",
              "fewer simulation steps than the planning horizon")
    if not sim["load_profile"]:
        _fail(source, "simulation.load_profile", "profile must be nonempty")
    if min(sim["load_profile"]) < 0:
        _fail(source, "simulation.load_profile", "profile values must be >= 0")
    for i, s in enumerate(sim["schemes"]):
        try:
            from .sim_harness import Scheme
            Scheme.parse(s)
        except (ValidationError, ValueError) as exc:
            _fail(source, f"simulation.schemes[{i}]", str(exc))


@dataclass(frozen=True)
class System:
    """In-memory 39-bus-style system: everything a solve or a run needs.

    Elastic participants are stored as templates with the case's initial
    state; `frame_participants` restamps them with the current states and
    appends the frame's loads and wind farms.
    """

    case: CaseFile
    grid: Grid
    flowmap: object
    elastic: tuple
    stage_dynamics: dict
    stage_box: dict
    loads: tuple                 # (id, node, p_nom), node 0-based
    winds: tuple                 # (id, node, g_row), node 0-based
    process: ProcessModel
    q0: np.ndarray
    T: int
    tau: float
    profile: np.ndarray
    sim_steps: int
    sim_runs: int
    base_seed: int
    n_mc: int
    phi_values: tuple
    scheme_labels: tuple
    solver: dict

    @property
    def n_nodes(self):
        return self.grid.n_nodes

    def profile_value(self, t):
        return float(self.profile[t % self.profile.size])

    def solver_settings(self) -> QpSettings:
        return QpSettings(
            tol_feas=self.solver["tol"],
            tol_gap_abs=self.solver["tol"],
            tol_gap_rel=self.solver["tol"],
            max_iter=self.solver["max_iter"],
            engine=self.solver["engine"],
        )

    def load_window(self, t, p_nom):
        idx = (t + np.arange(self.T)) % self.profile.size
        return p_nom * self.profile[idx]

    def frame_participants(self, t, states, mean_q):
        """Participant list for the T-step frame starting at step t.

        states maps elastic ids to their current state vectors; mean_q is
        the stacked driver forecast the wind nominals are read from.
        """
        out = [p.with_state(states[p.id]) for p in self.elastic]
        for lid, node, p_nom in self.loads:
            out.append(build_load(1.0, self.load_window(t, p_nom),
                                  id=lid, node=node))
        for wid, node, g_row in self.winds:
            out.append(build_wind_farm(g_row, mean_q, self.T,
                                       id=wid, node=node))
        return out

    def scaled(self, phi) -> "System":
        """Copy with the uncertainty magnitude scaled by phi.

        The driver capacity box, step bounds and initial state scale by phi
        (covariance by phi^2) so realization draws scale exactly with phi.
        """
        if phi <= 0:
            raise ValidationError("phi must be positive")
        return replace(self, process=self.process.scaled(phi),
                       q0=phi * self.q0)

    def wind_capacity_mw(self):
        """Largest possible total wind infeed (all drivers at capacity)."""
        return float(sum(np.asarray(g) @ self.process.q_max
                         for _, _, g in self.winds))


def build_system(case: CaseFile) -> System:
    raw = case.raw
    net, parts, unc = raw["network"], raw["participants"], raw["uncertainty"]
    sim, solver = raw["simulation"], raw["solver"]
    T = sim["horizon"]
    tau = sim["tau_hours"]

    lines = [Line(ln["from"] - 1, ln["to"] - 1, ln["reactance"],
                  ln.get("limit_mw"))
             for ln in net["lines"]]
    grid = Grid(n_nodes=net["n_nodes"], lines=lines)

    elastic = []
    stage_dynamics = {}
    stage_box = {}
    for g in parts["generators"]:
        p = build_thermal_generator(g["f_u"], g["H_u"], g["alpha"],
                                    g["p_max"], g["p_0"], T,
                                    id=g["id"], node=g["node"] - 1)
        elastic.append(p)
        stage_dynamics[p.id] = StageDynamics(
            A_tilde=np.array([[0.0, 0.0], [1.0, 0.0]]),
            B_tilde=np.array([1.0, 0.0]),
            C_tilde=np.array([1.0, 0.0]))
        zeros = np.zeros(2)
        caps = np.full(2, float(g["p_max"]))
        stage_box[p.id] = (zeros, caps, 0.0, float(g["p_max"]))
    for s in parts["storage"]:
        p = build_storage_unit(s["s_max"], s["gamma"], s["p_max"], s["s_0"],
                               tau, T, id=s["id"], node=s["node"] - 1)
        elastic.append(p)
        stage_dynamics[p.id] = StageDynamics(
            A_tilde=np.array([[0.0, 0.0, 0.0],
                              [1.0, 0.0, 0.0],
                              [0.0, 0.0, 1.0]]),
            B_tilde=np.array([1.0, 0.0, -tau]),
            C_tilde=np.array([1.0, 0.0, 0.0]))
        pm, sm = float(s["p_max"]), float(s["s_max"])
        stage_box[p.id] = (np.array([-pm, -pm, 0.0]),
                           np.array([pm, pm, sm]), -pm, pm)

    loads = tuple((l["id"], l["node"] - 1, float(l["p_nom"]))
                  for l in parts["loads"])
    winds = tuple((w["id"], w["node"] - 1,
                   np.asarray(w["g"], dtype=float))
                  for w in unc["wind"])

    nd = len(unc["sigma"])
    process = ProcessModel(
        Sigma=np.asarray(unc["sigma"], dtype=float),
        A_beta=np.vstack([np.eye(nd), -np.eye(nd)]),
        b_beta=np.concatenate([unc["beta_bound"], unc["beta_bound"]]),
        q_min=np.asarray(unc["q_min"], dtype=float),
        q_max=np.asarray(unc["q_max"], dtype=float))
    q0 = np.asarray(unc["q0"], dtype=float)

    profile = np.asarray(sim["load_profile"], dtype=float)
    # One template of every participant fixes the flow-map column layout;
    # the per-frame lists reuse the same ids and nodes.
    templates = list(elastic)
    for lid, node, p_nom in loads:
        templates.append(build_load(p_nom, profile[:T], id=lid, node=node))
    for wid, node, g_row in winds:
        templates.append(build_wind_farm(g_row, np.tile(q0, T), T,
                                         id=wid, node=node))
    flowmap = build_flow_maps(grid, templates, T)

    return System(
        case=case, grid=grid, flowmap=flowmap, elastic=tuple(elastic),
        stage_dynamics=stage_dynamics, stage_box=stage_box,
        loads=loads, winds=winds, process=process, q0=q0, T=T, tau=tau,
        profile=profile, sim_steps=sim["steps"], sim_runs=sim["runs"],
        base_seed=sim["seed"], n_mc=unc["n_mc"],
        phi_values=tuple(sim["phi"]), scheme_labels=tuple(sim["schemes"]),
        solver=dict(solver))
