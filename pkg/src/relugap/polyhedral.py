"""Projections onto polyhedra ``{u : G u >= h}`` through nonnegative least squares.

The least-distance problem ``min ||x|| s.t. G x >= h`` is solved with the
Lawson-Hanson reduction: find ``mu >= 0`` minimizing
``||E mu - f||`` with ``E = [G^T; h^T]`` and ``f = e_{d+1}``; the residual
``r = E mu - f`` gives ``x = -r[:d] / r[d]``, and ``r = 0`` means the
constraints are inconsistent.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

__all__ = [
    "nnls",
    "least_distance",
    "project_polyhedron",
    "project_cone",
    "ConeProjector",
    "signed_rows",
]


def signed_rows(X: np.ndarray, mask) -> np.ndarray:
    """Rows of ``(2D - I) X`` for the pattern ``mask``."""
    return np.where(np.asarray(mask, dtype=bool), 1.0, -1.0)[:, None] * X


def _ls(A, b, P):
    s = np.zeros(A.shape[1])
    if P.any():
        s[P] = np.linalg.lstsq(A[:, P], b, rcond=None)[0]
    return s


def nnls(A: np.ndarray, b: np.ndarray, passive=None, max_iter: Optional[int] = None):
    """Lawson-Hanson active-set solution of ``min ||A x - b||, x >= 0``.

    Parameters
    ----------
    A : ndarray, shape (m, k)
    b : ndarray, shape (m,)
    passive : ndarray of bool, shape (k,), optional
        Warm-start guess of the support of the solution.

    Returns
    -------
    x : ndarray, shape (k,)
    passive : ndarray of bool
        Final support, suitable as the next warm start.
    """
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = A.shape
    max_iter = 3 * k + 30 if max_iter is None else max_iter
    tol = 10.0 * np.finfo(float).eps * max(m, k) * max(np.linalg.norm(A, 1), 1e-300) * max(np.linalg.norm(b), 1e-300)

    P = np.zeros(k, dtype=bool) if passive is None else np.array(passive, dtype=bool)
    x = np.zeros(k)
    if P.any():
        # shrink the guess until the least-squares solution on it is positive
        while P.any():
            s = _ls(A, b, P)
            if (s[P] > 0).all():
                x = s
                break
            P &= s > 0
    banned = np.zeros(k, dtype=bool)
    for _ in range(max_iter):
        w = A.T @ (b - A @ x)
        cand = ~P & ~banned
        if not cand.any():
            break
        j = np.flatnonzero(cand)[np.argmax(w[cand])]
        if w[j] <= tol:
            break
        P[j] = True
        s = _ls(A, b, P)
        if s[j] <= 0:
            # rounding made the entering column useless; drop it for good
            P[j] = False
            banned[j] = True
            continue
        banned[:] = False
        while (s[P] <= 0).any():
            Q = P & (s <= 0)
            alpha = np.min(x[Q] / (x[Q] - s[Q]))
            x = x + alpha * (s - x)
            P &= x > 1e-15 * max(1.0, np.abs(x).max())
            x[~P] = 0.0
            s = _ls(A, b, P)
        x = s
    x[~P] = 0.0
    return x, P


def least_distance(G: np.ndarray, h: np.ndarray) -> Optional[np.ndarray]:
    """Minimum-norm ``x`` with ``G x >= h``, or ``None`` if none exists."""
    G = np.asarray(G, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    k, d = G.shape
    if k == 0 or np.all(h <= 0):
        return np.zeros(d)
    # row scaling leaves the feasible set unchanged and helps conditioning
    s = np.linalg.norm(G, axis=1)
    s[s == 0] = 1.0
    Gs, hs = G / s[:, None], h / s
    scale = np.abs(hs).max()
    hs = hs / scale
    E = np.vstack([Gs.T, hs[None, :]])
    f = np.zeros(d + 1)
    f[-1] = 1.0
    mu, _ = nnls(E, f)
    r = E @ mu - f
    if abs(r[-1]) <= 1e-13:
        return None
    x = -r[:d] / r[-1]
    # near-inconsistent systems give a tiny r[-1] and a point that misses the constraints
    if (hs - Gs @ x).max() > 1e-9 * (1.0 + np.linalg.norm(x)):
        return None
    return x * scale


def project_polyhedron(G: np.ndarray, h: np.ndarray, z: np.ndarray) -> Optional[np.ndarray]:
    """Euclidean projection of ``z`` onto ``{u : G u >= h}`` (``None`` if empty)."""
    z = np.asarray(z, dtype=np.float64)
    slack = G @ z - h
    if np.all(slack >= 0):
        return z.copy()
    x = least_distance(G, -slack)
    return None if x is None else z + x


def project_cone(G: np.ndarray, z: np.ndarray, passive=None):
    """Projection of ``z`` onto the cone ``{u : G u >= 0}``.

    Uses the Moreau split ``z = P_K(z) + P_polar(z)``; the polar part is the
    NNLS fit of ``z`` by nonnegative combinations of the rows of ``-G``.
    Returns the projection and the NNLS support for warm starts.
    """
    z = np.asarray(z, dtype=np.float64)
    if np.all(G @ z >= 0):
        return z.copy(), np.zeros(G.shape[0], dtype=bool)
    mu, P = nnls(-G.T, z, passive)
    return z + G.T @ mu, P


class ConeProjector:
    """Repeated projections onto one cone ``{u : G u >= 0}``.

    Iterative solvers project nearby points many times, and the optimal
    NNLS support rarely changes between calls. The projector caches the
    pseudo-inverse for the last support and accepts the resulting
    candidate whenever it satisfies the NNLS optimality conditions,
    falling back to a warm-started active-set solve otherwise.
    """

    def __init__(self, G: np.ndarray):
        self.G = np.asarray(G, dtype=np.float64)
        self._row_norms = np.linalg.norm(self.G, axis=1)
        self._passive = None
        self._GP = None
        self._pinv = None

    def _cache(self, P):
        self._passive = P
        self._GP = self.G[P]
        self._pinv = -np.linalg.pinv(self._GP.T)

    def __call__(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        Gz = self.G @ z
        if (Gz >= 0).all():
            return z.copy()
        if self._GP is not None:
            mu = self._pinv @ z
            if (mu >= 0).all():
                p = z + self._GP.T @ mu
                tol = 1e-13 * self._row_norms * np.linalg.norm(z)
                if (self.G @ p >= -tol).all():
                    return p
        mu, P = nnls(-self.G.T, z, self._passive)
        if P.any() and (self._passive is None or not np.array_equal(P, self._passive)):
            self._cache(P)
        return z + self.G.T @ mu

    def violation(self, u: np.ndarray) -> float:
        return float(max(0.0, -(self.G @ u).min())) if self.G.shape[0] else 0.0
