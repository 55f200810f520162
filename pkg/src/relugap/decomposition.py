"""Minimum-norm splitting of a vector into a difference of two cone elements.

For the cone ``K = {u : (2D - I) X u >= 0}`` of an activation pattern and a
direction ``w``, the sharpness is

    C(K, w) = min { ||u|| + ||v|| : u, v in K, u - v = w } / ||w||.

It is at least one by the triangle inequality and equals one exactly when
``w`` or ``-w`` lies in ``K``. The Chebyshev-style test here gives a
cheap upper bound: a point ``u`` with ``||u|| <= 1`` and
``(2D - I) X u >= eps |(2D - I) X z|`` certifies ``C(K, z) <= 1 + 1/eps``.
"""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np

from .arrangements import chamber_witness
from .core import Dataset, PreconditionError, SolverConfig
from .polyhedral import ConeProjector, least_distance, signed_rows

__all__ = [
    "DECOMPOSITION_TOL",
    "EPS_GRID",
    "Decomposition",
    "ChebyshevResult",
    "SharpnessReport",
    "LambdaCheck",
    "decompose_min_norm",
    "chebyshev_feasibility",
    "feasibility_decomposition",
    "cone_sharpness",
    "lambda_construction_check",
]

DECOMPOSITION_TOL = 1e-7
EPS_GRID = np.logspace(-4, 0, 20)
_MAX_ITERS = 20000


@dataclasses.dataclass
class Decomposition:
    """``w = u - v`` with ``u, v`` in the pattern cone.

    ``lower_bound`` is a dual certificate: no feasible split has
    ``||u|| + ||v||`` below it.
    """

    u: np.ndarray
    v: np.ndarray
    norm_sum: float
    sharpness: float
    certified: bool
    lower_bound: float
    iterations: int


@dataclasses.dataclass
class ChebyshevResult:
    feasible: bool
    u: Optional[np.ndarray]
    norm: float


@dataclasses.dataclass
class SharpnessReport:
    value: float
    upper_bound: float
    eps_star: Optional[float]
    decomposition: Decomposition


@dataclasses.dataclass
class LambdaCheck:
    """Minimum-norm solution of ``X lam >= b`` for a square Gaussian ``X``."""

    feasible: bool
    lam: Optional[np.ndarray]
    norm: float
    bound: float

    @property
    def success(self) -> bool:
        return self.feasible and self.norm <= self.bound


def _cone_rows(ds: Dataset, D) -> np.ndarray:
    D = np.asarray(D, dtype=bool)
    if D.shape != (ds.n,):
        raise PreconditionError(f"pattern has length {D.shape}, expected ({ds.n},)")
    return signed_rows(ds.X, D)


def _dual_bound(proj: ConeProjector, y: np.ndarray, w: np.ndarray) -> float:
    """Weak-duality lower bound ``y^T w / max(||P_K(y)||, ||P_K(-y)||)``."""
    m = max(np.linalg.norm(proj(y)), np.linalg.norm(proj(-y)))
    if m == 0:
        return 0.0
    return max(float(y @ w) / m, 0.0)


def _repair(G, h, u, v, w):
    """Shift ``(u, v)`` along the interior direction ``h`` until both lie in
    the cone and ``u - v = w`` holds exactly."""
    e = w - (u - v)
    u = u + e
    Gh = G @ h
    need = np.maximum(-(G @ u) / Gh, 0.0).max(initial=0.0)
    need = max(need, np.maximum(-(G @ v) / Gh, 0.0).max(initial=0.0))
    if need > 0:
        u = u + need * h
        v = v + need * h
    return u, v


def decompose_min_norm(ds: Dataset, D, w, cfg: Optional[SolverConfig] = None) -> Decomposition:
    """Solve ``min ||u|| + ||v||`` subject to ``u - v = w`` and ``u, v`` in the
    cone of pattern ``D``.

    Douglas-Rachford splitting between the separable part
    ``||u|| + ||v||`` plus the cone indicators, whose proximal map is a
    cone projection followed by block shrinkage, and the affine
    constraint ``u - v = w``. The final iterate is shifted along a
    strictly interior direction of the cone so that the constraints hold
    exactly, and the dual iterate gives a lower bound used for
    certification (relative gap at most ``cfg.tol_kkt``, default
    ``1e-7``).

    Raises
    ------
    PreconditionError
        If ``w`` is zero or the cone has empty interior.
    """
    tol = DECOMPOSITION_TOL if cfg is None else cfg.tol_kkt
    max_iters = _MAX_ITERS if cfg is None else cfg.max_iters
    w = np.asarray(w, dtype=np.float64)
    wn = float(np.linalg.norm(w))
    if w.shape != (ds.d,) or wn == 0:
        raise PreconditionError("w must be a nonzero vector of length d")
    G = _cone_rows(ds, D)
    h = chamber_witness(ds.X, D)
    if h is None:
        raise PreconditionError("pattern cone has empty interior")
    h = h / np.linalg.norm(h)
    Gw = G @ w
    zero = np.zeros_like(w)
    if (Gw >= 0).all():
        return Decomposition(w.copy(), zero, wn, 1.0, True, wn, 0)
    if (Gw <= 0).all():
        return Decomposition(zero, -w, wn, 1.0, True, wn, 0)

    proj_u, proj_v, proj_d = ConeProjector(G), ConeProjector(G), ConeProjector(G)
    gamma = wn

    def prox_f(a, b):
        out = []
        for proj, z in ((proj_u, a), (proj_v, b)):
            p = proj(z)
            nrm = np.linalg.norm(p)
            out.append((1.0 - gamma / nrm) * p if nrm > gamma else np.zeros_like(p))
        return out

    def prox_g(a, b):
        e = 0.5 * (a - b - w)
        return a - e, b + e

    # start from the naive split along the interior direction
    u0, v0 = _repair(G, h, w, zero, w)
    za, zb = u0.copy(), v0.copy()
    best = None
    lower = 0.0
    it = 0
    for it in range(1, max_iters + 1):
        xa, xb = prox_g(za, zb)
        ya, yb = prox_f(2 * xa - za, 2 * xb - zb)
        za, zb = za + ya - xa, zb + yb - xb
        if it % 25 and it != max_iters:
            continue
        u, v = _repair(G, h, ya, yb, w)
        total = float(np.linalg.norm(u) + np.linalg.norm(v))
        if best is None or total < best[2]:
            best = (u, v, total)
        # (z - x) / gamma lies in the normal cone of the affine set: a multiple of (y, -y)
        y_dual = 0.5 * ((za - xa) - (zb - xb)) / gamma
        lower = max(lower, _dual_bound(proj_d, -y_dual, w), _dual_bound(proj_d, y_dual, w))
        if best[2] - lower <= tol * best[2]:
            break
    u, v, total = best
    lower = min(lower, total)
    return Decomposition(u, v, total, max(total / wn, 1.0), best[2] - lower <= tol * best[2], lower, it)


def chebyshev_feasibility(ds: Dataset, D, z, eps: float) -> ChebyshevResult:
    """Smallest ``u`` with ``(2D - I) X u >= eps |(2D - I) X z|``; feasible if ``||u|| <= 1``."""
    z = np.asarray(z, dtype=np.float64)
    if abs(np.linalg.norm(z) - 1.0) > 1e-10:
        raise PreconditionError("z must be a unit vector")
    if eps < 0:
        raise PreconditionError("eps must be nonnegative")
    G = _cone_rows(ds, D)
    u = least_distance(G, eps * np.abs(G @ z))
    if u is None:
        return ChebyshevResult(False, None, float("inf"))
    norm = float(np.linalg.norm(u))
    ok = norm <= 1.0 + 1e-12
    return ChebyshevResult(ok, u if ok else None, norm)


def feasibility_decomposition(u: np.ndarray, z: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Split ``z = v1 - v2`` from a feasible Chebyshev point ``u``.

    ``v1 = (u / eps + z) / 2`` and ``v2 = (u / eps - z) / 2`` lie in the
    cone and have ``||v1|| + ||v2|| <= 1 + 1 / eps`` when ``||z|| = 1``.
    """
    u = np.asarray(u, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    return 0.5 * (u / eps + z), 0.5 * (u / eps - z)


def cone_sharpness(ds: Dataset, D, z, cfg: Optional[SolverConfig] = None, *, grid=EPS_GRID) -> SharpnessReport:
    """Sharpness of the pattern cone at ``z`` and its Chebyshev upper bound.

    The bound is ``1 + 1 / eps*`` for the largest ``eps`` on ``grid``
    (20 log-spaced points in ``[1e-4, 1]``) at which
    :func:`chebyshev_feasibility` succeeds; it is infinite when none does.
    """
    dec = decompose_min_norm(ds, D, z, cfg)
    eps_star = None
    for eps in sorted(grid, reverse=True):
        if chebyshev_feasibility(ds, D, z, float(eps)).feasible:
            eps_star = float(eps)
            break
    upper = 1.0 + 1.0 / eps_star if eps_star is not None else float("inf")
    return SharpnessReport(dec.sharpness, upper, eps_star, dec)


def lambda_construction_check(d: int, b, seed: int, c: float = 1.0) -> LambdaCheck:
    """Minimum-norm ``lam`` with ``X lam >= b`` for a ``d x d`` standard Gaussian ``X``.

    Success means ``||lam|| <= 5 c``; ``c`` is the sample-to-feature ratio
    that sets the admissible size ``||b|| <= 2 sqrt(c d)`` of ``b``.
    """
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (d,):
        raise PreconditionError(f"b must have length {d}")
    X = np.random.default_rng(seed).standard_normal((d, d))
    lam = least_distance(X, b)
    bound = 5.0 * c
    if lam is None:
        return LambdaCheck(False, None, float("inf"), bound)
    return LambdaCheck(True, lam, float(np.linalg.norm(lam)), bound)
