"""Small helpers for polytopes in inequality form {y : M y <= w}.

Used by the archetype builders (compactness probe), the uncertainty set
(box vertex sampling) and the test oracles (vertex enumeration).
"""
from __future__ import annotations

import itertools

import numpy as np


def pure_bound_rows(M):
    """Classify rows of M that are scalar bounds (single nonzero entry).

    Returns two boolean arrays (has_upper, has_lower) of length M.shape[1]:
    has_upper[j] is True when some row of M equals +c*e_j with c > 0,
    has_lower[j] likewise for -c*e_j.
    """
    M = np.asarray(M, dtype=float)
    has_upper = np.zeros(M.shape[1], dtype=bool)
    has_lower = np.zeros(M.shape[1], dtype=bool)
    for r in range(M.shape[0]):
        nz = np.flatnonzero(M[r])
        if len(nz) == 1:
            j = nz[0]
            if M[r, j] > 0:
                has_upper[j] = True
            else:
                has_lower[j] = True
    return has_upper, has_lower


def is_bounded(M):
    """True iff {y : M y <= w} is bounded for every w (trivial recession cone).

    Fast path: every coordinate carries an explicit upper and lower bound row.
    Otherwise probe the recession cone {M y <= 0} coordinate by coordinate
    with small LPs.
    """
    M = np.asarray(M, dtype=float)
    up, lo = pure_bound_rows(M)
    if up.all() and lo.all():
        return True
    from scipy.optimize import linprog

    n = M.shape[1]
    for j in range(n):
        for sign in (1.0, -1.0):
            c = np.zeros(n)
            c[j] = -sign  # maximize sign * y_j
            res = linprog(c, A_ub=M, b_ub=np.zeros(M.shape[0]),
                          bounds=[(None, None)] * n, method="highs")
            if res.status == 3:  # unbounded
                return False
            if res.status == 0 and res.fun < -1e-9:
                return False
    return True


def sample_box_vertices(lower, upper, n, rng):
    """Sample n vertices (with replacement) of the box [lower, upper].

    Returns an (n, dim) array; each row picks lower or upper per coordinate.
    """
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    picks = rng.integers(0, 2, size=(n, lower.size))
    return np.where(picks == 1, upper, lower)


def enumerate_box_vertices(lower, upper):
    """All 2^dim vertices of the box [lower, upper] (dim <= 20 guarded)."""
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    dim = lower.size
    if dim > 20:
        raise ValueError(f"refusing to enumerate 2^{dim} vertices")
    out = np.empty((2 ** dim, dim))
    for i, picks in enumerate(itertools.product((0, 1), repeat=dim)):
        p = np.asarray(picks)
        out[i] = np.where(p == 1, upper, lower)
    return out
