"""Lossless DC transmission model.

Line flows are linear in nodal injections once the per-step injections sum
to zero; the map is the standard reduced-susceptance-matrix (PTDF) solve
with a fixed reference node.  Only lines with finite limits contribute
constraint rows; each limited line yields a +/- row pair per step.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

__all__ = ["Line", "Grid", "FlowMap", "build_flow_maps", "ptdf_matrix",
           "balance_residual", "line_flows", "injections_by_node"]


@dataclass(frozen=True)
class Line:
    """Transmission line from_node -> to_node with reactance x (p.u.).

    limit_mw is the thermal/flow limit in MW, or None for an unlimited line.
    A limit given as a phase-angle difference bound (radians) is converted
    to MW via the susceptance at construction.
    """

    from_node: int
    to_node: int
    reactance: float
    limit_mw: float | None = None

    def __post_init__(self):
        if self.reactance <= 0:
            raise ValidationError(
                f"line {self.from_node}-{self.to_node}: reactance must be > 0")
        if self.limit_mw is not None and self.limit_mw <= 0:
            raise ValidationError(
                f"line {self.from_node}-{self.to_node}: limit must be > 0")

    @property
    def susceptance(self):
        return 1.0 / self.reactance

    @classmethod
    def from_angle_limit(cls, from_node, to_node, reactance, angle_limit_rad):
        """Build a line whose limit is a phase-angle-difference bound."""
        return cls(from_node, to_node, reactance,
                   limit_mw=angle_limit_rad / reactance)


@dataclass(frozen=True)
class Grid:
    """Connected transmission grid on nodes 0..n_nodes-1."""

    n_nodes: int
    lines: tuple

    def __post_init__(self):
        object.__setattr__(self, "lines", tuple(self.lines))
        for ln in self.lines:
            for node in (ln.from_node, ln.to_node):
                if not (0 <= node < self.n_nodes):
                    raise ValidationError(f"line references node {node} outside grid")
        if not self._connected():
            raise ValidationError("grid graph is not connected")

    def _connected(self):
        adj = [[] for _ in range(self.n_nodes)]
        for ln in self.lines:
            adj[ln.from_node].append(ln.to_node)
            adj[ln.to_node].append(ln.from_node)
        seen = {0}
        stack = [0]
        while stack:
            v = stack.pop()
            for w in adj[v]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return len(seen) == self.n_nodes

    @property
    def limited_lines(self):
        return tuple(ln for ln in self.lines if ln.limit_mw is not None)


def ptdf_matrix(grid: Grid, reference=0):
    """Power-transfer distribution factors: flows = PTDF @ injections.

    Rows follow grid.lines order (positive = from_node -> to_node direction);
    columns are nodes.  The reference node's column is identically zero, but
    flows of balanced injections do not depend on the reference choice.
    """
    n = grid.n_nodes
    L = np.zeros((n, n))
    for ln in grid.lines:
        b = ln.susceptance
        i, j = ln.from_node, ln.to_node
        L[i, i] += b
        L[j, j] += b
        L[i, j] -= b
        L[j, i] -= b
    keep = [v for v in range(n) if v != reference]
    L_red = L[np.ix_(keep, keep)]
    L_inv = np.linalg.inv(L_red)
    theta_map = np.zeros((n, n))          # injections -> angles, theta_ref = 0
    theta_map[np.ix_(keep, keep)] = L_inv
    rows = np.zeros((len(grid.lines), n))
    for r, ln in enumerate(grid.lines):
        rows[r] = ln.susceptance * (theta_map[ln.from_node] - theta_map[ln.to_node])
    return rows


@dataclass(frozen=True)
class FlowMap:
    """Injection-to-constrained-flow data for a participant set.

    directed_ptdf stacks, for each limited line, the +direction and
    -direction PTDF rows (shape 2*L_f x n_nodes).  gamma(participant) is the
    horizon replication: a (2*L_f*T x T) block-diagonal matrix taking the
    participant's injection sequence to its per-step flow contributions,
    ordered step-major (all directed lines for step 0, then step 1, ...).
    p_bar stacks the matching limits.
    """

    directed_ptdf: np.ndarray
    p_bar: np.ndarray
    T: int
    node_of: dict
    limited_line_index: tuple
    full_ptdf: np.ndarray = field(repr=False, default=None)

    @property
    def n_rows(self):
        return self.p_bar.size

    @property
    def rows_per_step(self):
        return self.directed_ptdf.shape[0]

    def static_column(self, participant_id):
        """Per-step flow contribution of 1 MW injected at the participant's node."""
        return self.directed_ptdf[:, self.node_of[participant_id]]

    def gamma(self, participant_id):
        col = self.static_column(participant_id).reshape(-1, 1)
        return np.kron(np.eye(self.T), col)


def build_flow_maps(grid: Grid, participants, T, reference=0) -> FlowMap:
    """Build the flow-constraint data for the given participants and horizon.

    Unlimited lines contribute no rows.  Raises if the grid is disconnected
    (via Grid) or a participant sits on an unknown node.
    """
    ptdf = ptdf_matrix(grid, reference=reference)
    lim_idx = [i for i, ln in enumerate(grid.lines) if ln.limit_mw is not None]
    directed = []
    limits = []
    for i in lim_idx:
        directed.append(ptdf[i])
        directed.append(-ptdf[i])
        limits.extend([grid.lines[i].limit_mw, grid.lines[i].limit_mw])
    directed = np.array(directed) if directed else np.zeros((0, grid.n_nodes))
    node_of = {}
    for p in participants:
        if not (0 <= p.node < grid.n_nodes):
            raise ValidationError(f"participant {p.id} on unknown node {p.node}")
        node_of[p.id] = p.node
    return FlowMap(
        directed_ptdf=directed,
        p_bar=np.tile(np.asarray(limits, dtype=float), T),
        T=T,
        node_of=node_of,
        limited_line_index=tuple(lim_idx),
        full_ptdf=ptdf,
    )


def balance_residual(participants, policies, delta):
    """Per-step net injection sum for the given policies at error delta.

    Elastic participants inject C (A x0 + B u) with u = e + D delta;
    inelastic ones inject r + G delta.  At a robust optimum this is zero (to
    solver tolerance) for every delta in the uncertainty set.
    """
    delta = np.asarray(delta, dtype=float).reshape(-1)
    total = None
    for p in participants:
        inj = p.r.copy()
        if p.G is not None:
            inj = inj + p.G @ delta
        if p.elastic:
            pol = policies[p.id]
            u = pol.e + pol.D @ delta
            x = p.dynamics.A @ p.x0 + p.dynamics.B @ u
            inj = inj + p.dynamics.C @ x
        total = inj if total is None else total + inj
    return total


def injections_by_node(participants, policies, delta, n_nodes):
    """Nodal injection matrix (T x n_nodes) for the given policies at delta."""
    delta = np.asarray(delta, dtype=float).reshape(-1)
    T = participants[0].T
    out = np.zeros((T, n_nodes))
    for p in participants:
        inj = p.r.copy()
        if p.G is not None:
            inj = inj + p.G @ delta
        if p.elastic:
            pol = policies[p.id]
            u = pol.e + pol.D @ delta
            x = p.dynamics.A @ p.x0 + p.dynamics.B @ u
            inj = inj + p.dynamics.C @ x
        out[:, p.node] += inj
    return out


def line_flows(flowmap: FlowMap, injections):
    """Directed constrained-line flows for per-step nodal injections.

    injections is (T x n_nodes); each step must balance to zero (DC flow is
    undefined otherwise).  Returns the stacked (2*L_f*T,) flow vector in
    flowmap row order; feasibility means flows <= p_bar elementwise.
    """
    inj = np.asarray(injections, dtype=float)
    if inj.ndim != 2 or inj.shape[0] != flowmap.T:
        raise ValidationError(
            f"injections must be ({flowmap.T} x n_nodes), got {inj.shape}")
    scale = 1.0 + np.abs(inj).max()
    sums = inj.sum(axis=1)
    if np.abs(sums).max() > 1e-6 * scale:
        raise ValidationError(
            f"injections unbalanced (max per-step sum {np.abs(sums).max():.3e})")
    return (inj @ flowmap.directed_ptdf.T).reshape(-1)
