"""Forecast-error model for the wind driver.

The driver q evolves as a saturating correlated random walk: q+ is
q + beta clipped to [q_min, q_max], with beta drawn from a truncated
Gaussian restricted to a bounded polytope A_beta beta <= b_beta.  Moments
of the T-step error delta = q_path - E[q_path] are estimated by Monte
Carlo; the uncertainty set is a per-component box anchored at the current
driver state, so every realizable path is contained by construction.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AffineReservesError, ValidationError
from .polytopes import (enumerate_box_vertices, is_bounded, pure_bound_rows,
                        sample_box_vertices)

__all__ = [
    "ProcessModel", "UncertaintyPolytope", "MomentEstimate",
    "step_process", "sample_beta", "sample_beta_batch", "estimate_moments",
    "build_uncertainty_polytope", "simulate_paths",
]

_MIN_ACCEPT = 1e-4


@dataclass(frozen=True)
class ProcessModel:
    """Saturating random-walk driver parameters."""

    Sigma: np.ndarray
    A_beta: np.ndarray
    b_beta: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray

    def __post_init__(self):
        Sigma = np.atleast_2d(np.asarray(self.Sigma, dtype=float))
        w = np.linalg.eigvalsh(0.5 * (Sigma + Sigma.T))
        if w[0] < -1e-9 * max(1.0, w[-1]):
            raise ValidationError(f"Sigma is not PSD (min eigenvalue {w[0]:.3e})")
        A = np.atleast_2d(np.asarray(self.A_beta, dtype=float))
        b = np.asarray(self.b_beta, dtype=float).reshape(-1)
        if A.shape != (b.size, Sigma.shape[0]):
            raise ValidationError("A_beta/b_beta dimensions disagree with Sigma")
        if np.any(b < 0):
            raise ValidationError("beta polytope must contain 0 (b_beta >= 0)")
        if not is_bounded(A):
            raise ValidationError("beta polytope must be bounded")
        qmin = np.asarray(self.q_min, dtype=float).reshape(-1)
        qmax = np.asarray(self.q_max, dtype=float).reshape(-1)
        if qmin.size != Sigma.shape[0] or qmax.size != Sigma.shape[0]:
            raise ValidationError("q_min/q_max dimension disagrees with Sigma")
        if np.any(qmin >= qmax):
            raise ValidationError("q_min must be < q_max elementwise")
        object.__setattr__(self, "Sigma", 0.5 * (Sigma + Sigma.T))
        object.__setattr__(self, "A_beta", A)
        object.__setattr__(self, "b_beta", b)
        object.__setattr__(self, "q_min", qmin)
        object.__setattr__(self, "q_max", qmax)

    @property
    def n_delta(self):
        return self.Sigma.shape[0]

    def step_bound(self):
        """Per-component bound on |beta_j| implied by the beta polytope."""
        up, lo = pure_bound_rows(self.A_beta)
        n = self.n_delta
        bound = np.full(n, np.nan)
        if up.all() and lo.all():
            for j in range(n):
                cand = []
                for r in range(self.A_beta.shape[0]):
                    nz = np.flatnonzero(self.A_beta[r])
                    if len(nz) == 1 and nz[0] == j:
                        cand.append(self.b_beta[r] / abs(self.A_beta[r, j]))
                bound[j] = max(cand)
            return bound
        from scipy.optimize import linprog
        for j in range(n):
            vals = []
            for sign in (1.0, -1.0):
                c = np.zeros(n)
                c[j] = -sign
                res = linprog(c, A_ub=self.A_beta, b_ub=self.b_beta,
                              bounds=[(None, None)] * n, method="highs")
                if res.status != 0:
                    raise ValidationError("beta polytope probe failed")
                vals.append(-res.fun)
            bound[j] = max(vals)
        return bound

    def scaled(self, phi):
        """Scale capacities and step bounds by phi and the covariance by phi^2."""
        if phi <= 0:
            raise ValidationError("phi must be positive")
        return ProcessModel(
            Sigma=self.Sigma * phi ** 2,
            A_beta=self.A_beta,
            b_beta=self.b_beta * phi,
            q_min=self.q_min * phi,
            q_max=self.q_max * phi,
        )


@dataclass(frozen=True)
class UncertaintyPolytope:
    """Box {delta : S delta <= h} with S = [I; -I], h = [upper; -lower].

    Entries of h are floored at a small epsilon so 0 stays strictly interior
    even when the nominal path touches a saturation bound.
    """

    S: np.ndarray
    h: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @property
    def q_rows(self):
        return self.h.size

    @property
    def dim(self):
        return self.lower.size

    def contains(self, delta, tol=1e-9):
        delta = np.asarray(delta, dtype=float)
        return bool(np.all(self.S @ delta <= self.h + tol))

    def sample_vertices(self, n, rng):
        return sample_box_vertices(self.lower, self.upper, n, rng)

    def enumerate_vertices(self):
        return enumerate_box_vertices(self.lower, self.upper)

    @classmethod
    def from_bounds(cls, lower, upper, eps=1e-6):
        lower = np.asarray(lower, dtype=float).reshape(-1)
        upper = np.asarray(upper, dtype=float).reshape(-1)
        up = np.maximum(upper, eps)
        lo = np.minimum(lower, -eps)
        dim = lower.size
        S = np.vstack([np.eye(dim), -np.eye(dim)])
        h = np.concatenate([up, -lo])
        return cls(S=S, h=h, lower=lo, upper=up)


@dataclass(frozen=True)
class MomentEstimate:
    """Monte-Carlo moments of the T-step driver path from a given state."""

    mean_q: np.ndarray
    mean_delta: np.ndarray
    second_moment: np.ndarray
    n_samples: int


def step_process(q_k, beta_k, model: ProcessModel):
    """One driver transition: clamp(q + beta) to the capacity box."""
    q_k = np.asarray(q_k, dtype=float)
    beta_k = np.asarray(beta_k, dtype=float)
    return np.clip(q_k + beta_k, model.q_min, model.q_max)


def _covariance_factor(Sigma):
    """L with L L' = Sigma, valid for any PSD Sigma (eigenvalue clamp)."""
    w, V = np.linalg.eigh(Sigma)
    return V * np.sqrt(np.maximum(w, 0.0))


def _rejection_sample(model, n, rng):
    """n truncated-Gaussian draws; vectorized rejection against the polytope."""
    nd = model.n_delta
    L = _covariance_factor(model.Sigma)
    out = np.empty((n, nd))
    filled = 0
    drawn = 0
    accepted = 0
    while filled < n:
        want = max(n - filled, 64)
        cand = rng.standard_normal((want, nd)) @ L.T
        ok = np.all(cand @ model.A_beta.T <= model.b_beta, axis=1)
        drawn += want
        accepted += int(ok.sum())
        take = cand[ok][:n - filled]
        out[filled:filled + take.shape[0]] = take
        filled += take.shape[0]
        if drawn >= 2e5 and accepted < _MIN_ACCEPT * drawn:
            raise AffineReservesError(
                f"truncation acceptance rate {accepted / drawn:.2e} below "
                f"{_MIN_ACCEPT}; reparameterize Sigma or the beta bounds")
    return out


def sample_beta(model: ProcessModel, rng):
    """One draw of beta from the truncated Gaussian (always inside the bounds)."""
    return _rejection_sample(model, 1, rng)[0]


def sample_beta_batch(model: ProcessModel, n, rng):
    """n independent draws of beta (row per draw)."""
    return _rejection_sample(model, n, rng)


def simulate_paths(q0, model: ProcessModel, T, n_paths, rng):
    """Simulate n_paths independent T-step driver paths from q0.

    Returns (n_paths, T, n_delta); path[:, k] is the driver after k+1 steps.
    """
    nd = model.n_delta
    q = np.broadcast_to(np.asarray(q0, dtype=float), (n_paths, nd)).copy()
    out = np.empty((n_paths, T, nd))
    for k in range(T):
        beta = _rejection_sample(model, n_paths, rng)
        q = np.clip(q + beta, model.q_min, model.q_max)
        out[:, k] = q
    return out


def estimate_moments(q0, model: ProcessModel, T, n_mc, rng) -> MomentEstimate:
    """Monte-Carlo moment estimates of the T-step path from state q0.

    mean_q is the flattened (step-major) sample mean; second_moment is the
    sample second moment of delta = path - mean_q, PSD-projected to absorb
    estimation noise.  Deterministic given (q0, model, T, n_mc, seed).
    """
    if n_mc < 1000:
        raise ValidationError(f"n_mc must be >= 1000, got {n_mc}")
    paths = simulate_paths(q0, model, T, n_mc, rng)
    flat = paths.reshape(n_mc, -1)
    mean_q = flat.mean(axis=0)
    dev = flat - mean_q
    M2 = dev.T @ dev / n_mc
    M2 = 0.5 * (M2 + M2.T)
    w, V = np.linalg.eigh(M2)
    if w[0] < 0:
        M2 = (V * np.maximum(w, 0.0)) @ V.T
        M2 = 0.5 * (M2 + M2.T)
    return MomentEstimate(
        mean_q=mean_q,
        mean_delta=np.zeros_like(mean_q),
        second_moment=M2,
        n_samples=n_mc,
    )


def build_uncertainty_polytope(q0, model: ProcessModel, T, moments,
                               eps=1e-6) -> UncertaintyPolytope:
    """Anchored box for the T-step error delta = q_path - mean_q.

    For step k (1-based) and component j the driver provably satisfies both
    |q_k - q0_j| <= k * b_step_j and q_k in [q_min, q_max]; subtracting the
    nominal mean path gives per-entry bounds
        max(q_min_j, q0_j - k b_step_j) - mean_kj <= delta_kj
        delta_kj <= min(q_max_j, q0_j + k b_step_j) - mean_kj,
    growing with k until the capacity cap binds.  h entries are floored at
    eps so the origin stays strictly interior.
    """
    q0 = np.asarray(q0, dtype=float).reshape(-1)
    if np.any(q0 < model.q_min - 1e-9) or np.any(q0 > model.q_max + 1e-9):
        raise ValidationError("q0 outside the capacity box")
    mean = np.asarray(moments.mean_q, dtype=float).reshape(T, model.n_delta)
    b_step = model.step_bound()
    k = np.arange(1, T + 1).reshape(-1, 1)
    upper = np.minimum(model.q_max, q0 + k * b_step) - mean
    lower = np.maximum(model.q_min, q0 - k * b_step) - mean
    return UncertaintyPolytope.from_bounds(lower.reshape(-1), upper.reshape(-1),
                                           eps=eps)
