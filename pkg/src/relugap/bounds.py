"""Certified optimality-gap quantities for randomly subsampled pattern sets.

Central object is the expected activation Gram matrix

    M = E_g[ D(g) X X^T D(g) ],  D(g) = diag(1[X g >= 0]),  g ~ N(0, I),

whose entries have the closed form

    M_ij = (1/2 - arccos(rho_ij) / (2 pi)) <x_i, x_j>,

with ``rho_ij`` the cosine between rows ``i`` and ``j``. The ratio
``kappa = lambda_max(X X^T) / lambda_min(M)`` controls how many sampled
patterns are needed before the sampled problem behaves like the full one.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

import numpy as np
from scipy import linalg

from .arrangements import PatternSet
from .core import BoundReport, Dataset, PreconditionError, SizeGuardError

__all__ = [
    "MAX_MAXCUT_N",
    "GramSummary",
    "LowerBound",
    "TighterFactor",
    "expected_gram",
    "sampled_gram",
    "gram_summary",
    "pattern_energies",
    "compute_kappa",
    "bound_upper_gated",
    "bound_lower_full",
    "bound_tighter_factor",
    "bound_maxcut",
    "sample_thresholds",
    "relative_gap_factors",
    "kappa_bounds",
    "sharpness_bound",
    "width_factor",
    "bound_report",
]

MAX_MAXCUT_N = 20
SINGULAR_RTOL = 1e-10
CLAMP_TOL = 1e-12
_MAXCUT_CHUNK = 1 << 14


@dataclasses.dataclass
class GramSummary:
    M: np.ndarray
    M_sampled: Optional[np.ndarray]
    lambda_min_M: float
    lambda_max_gram: float
    kappa: Optional[float]
    per_pattern_energies: Optional[np.ndarray]


@dataclasses.dataclass
class LowerBound:
    """Dual lower bound on the full gated optimum.

    ``g_is_exact`` is true only when ``G`` was maximized over the complete
    enumerated arrangement; otherwise ``G`` may be too large and the
    value is a heuristic, not a certificate.
    """

    value: float
    G: float
    g_is_exact: bool


@dataclasses.dataclass
class TighterFactor:
    value: Optional[float]
    g_is_exact: bool


def _sym_eigvalsh(A: np.ndarray) -> np.ndarray:
    return linalg.eigvalsh(0.5 * (A + A.T))


def expected_gram(ds: Dataset) -> np.ndarray:
    """Closed-form ``E[D X X^T D]`` over Gaussian gate directions.

    Cosines are clamped to ``[-1, 1]`` and the diagonal is set to
    ``||x_i||^2 / 2`` exactly.
    """
    X = ds.X
    norms = np.linalg.norm(X, axis=1)
    if (norms == 0).any():
        raise PreconditionError("expected Gram matrix needs nonzero rows")
    K = X @ X.T
    rho = K / np.outer(norms, norms)
    if np.abs(rho).max() > 1 + CLAMP_TOL:
        raise PreconditionError("row cosines outside [-1, 1] beyond rounding")
    rho = np.clip(rho, -1.0, 1.0)
    M = (0.5 - np.arccos(rho) / (2 * np.pi)) * K
    M = 0.5 * (M + M.T)
    M[np.diag_indices_from(M)] = 0.5 * norms**2
    return M


def _raw_masks(ps) -> np.ndarray:
    masks = ps.masks if isinstance(ps, PatternSet) else np.asarray(ps, dtype=bool)
    if masks.ndim != 2 or masks.shape[0] == 0:
        raise PreconditionError("pattern set must be nonempty")
    return masks


def sampled_gram(ds: Dataset, ps) -> np.ndarray:
    """``(1/P) sum_i D_i X X^T D_i`` over the supplied patterns.

    ``ps`` may be a :class:`PatternSet` (deduplicated) or a raw boolean
    array of i.i.d. draws with repeats, which gives the unbiased average.
    """
    masks = _raw_masks(ps)
    if masks.shape[1] != ds.n:
        raise PreconditionError("pattern length does not match the dataset")
    Mf = masks.astype(np.float64)
    S = (ds.X @ ds.X.T) * (Mf.T @ Mf) / Mf.shape[0]
    return 0.5 * (S + S.T)


def pattern_energies(ds: Dataset, ps) -> np.ndarray:
    """``y^T D_i X X^T D_i y = ||X^T D_i y||^2`` for every pattern."""
    Mf = _raw_masks(ps).astype(np.float64)
    return (((Mf * ds.y) @ ds.X) ** 2).sum(axis=1)


def _extremes(ds: Dataset, M: Optional[np.ndarray] = None) -> tuple[float, float, float]:
    M = expected_gram(ds) if M is None else M
    ev = _sym_eigvalsh(M)
    gram_max = float(_sym_eigvalsh(ds.X @ ds.X.T)[-1])
    return float(ev[0]), float(ev[-1]), gram_max


def compute_kappa(ds: Dataset) -> Optional[float]:
    """``lambda_max(X X^T) / lambda_min(M)``, or ``None`` when ``M`` is
    numerically singular (``lambda_min <= 1e-10 lambda_max``)."""
    lo, hi, gram_max = _extremes(ds)
    if lo <= SINGULAR_RTOL * hi:
        return None
    return gram_max / lo


def bound_upper_gated(ds: Dataset) -> Optional[float]:
    """``sqrt(2) beta ||y|| / sqrt(lambda_min(M))``; ``None`` if ``M`` is singular."""
    lo, hi, _ = _extremes(ds)
    if lo <= SINGULAR_RTOL * hi:
        return None
    return math.sqrt(2.0) * ds.beta * float(np.linalg.norm(ds.y)) / math.sqrt(lo)


def _G_factor(ds: Dataset, ps) -> float:
    top = math.sqrt(float(pattern_energies(ds, ps).max()))
    if top == 0:
        return -math.inf if ds.beta > 0 else 1.0
    return 1.0 - ds.beta / (2.0 * top)


def _exact(ps, exact: Optional[bool]) -> bool:
    if exact is not None:
        return bool(exact)
    return isinstance(ps, PatternSet) and ps.provenance == "enumerated"


def bound_lower_full(ds: Dataset, ps_for_max, *, exact: Optional[bool] = None) -> LowerBound:
    """``G beta ||y|| / sqrt(lambda_max(X X^T))`` with
    ``G = 1 - beta / (2 max_i sqrt(y^T M_i y))`` over ``ps_for_max``.

    ``exact`` defaults to whether ``ps_for_max`` is a full enumeration.
    """
    G = _G_factor(ds, ps_for_max)
    gram_max = float(_sym_eigvalsh(ds.X @ ds.X.T)[-1])
    value = G * ds.beta * float(np.linalg.norm(ds.y)) / math.sqrt(gram_max)
    if not math.isfinite(value):
        value = -math.inf
    return LowerBound(value, G, _exact(ps_for_max, exact))


def bound_tighter_factor(ds: Dataset, ps, *, ps_for_max=None, exact: Optional[bool] = None) -> TighterFactor:
    """``(sqrt(2) / G) max_i sqrt(y^T M_i y) sqrt(y^T M_P^{-1} y) / ||y||^2``.

    ``M_P`` is the sampled Gram matrix of ``ps``; the maximum and ``G``
    run over ``ps_for_max`` (default ``ps``). ``None`` when ``M_P`` is
    singular, ``y = 0`` or ``G <= 0``.
    """
    ps_for_max = ps if ps_for_max is None else ps_for_max
    yy = float(ds.y @ ds.y)
    G = _G_factor(ds, ps_for_max)
    flag = _exact(ps_for_max, exact)
    if yy == 0 or not G > 0:
        return TighterFactor(None, flag)
    S = sampled_gram(ds, ps)
    ev = _sym_eigvalsh(S)
    if ev[0] <= SINGULAR_RTOL * max(ev[-1], 1e-300):
        return TighterFactor(None, flag)
    quad = float(ds.y @ linalg.solve(S, ds.y, assume_a="pos"))
    top = math.sqrt(float(pattern_energies(ds, ps_for_max).max()))
    return TighterFactor(math.sqrt(2.0) / G * top * math.sqrt(quad) / yy, flag)


def bound_maxcut(ds: Dataset) -> float:
    """``sqrt(max_b b^T diag(y) X X^T diag(y) b)`` over ``b in {0, 1}^n`` by enumeration."""
    n = ds.n
    if n > MAX_MAXCUT_N:
        raise SizeGuardError(f"exhaustive MAX-CUT bound limited to n <= {MAX_MAXCUT_N}, got {n}")
    Q = (ds.y[:, None] * ds.X) @ (ds.y[:, None] * ds.X).T
    bits = np.arange(n, dtype=np.int64)
    best = 0.0
    for start in range(0, 1 << n, _MAXCUT_CHUNK):
        codes = np.arange(start, min(start + _MAXCUT_CHUNK, 1 << n), dtype=np.int64)
        B = ((codes[:, None] >> bits) & 1).astype(np.float64)
        best = max(best, float(np.einsum("ki,ij,kj->k", B, Q, B).max()))
    return math.sqrt(max(best, 0.0))


def _ceil(x: float) -> int:
    # products like 2 * 2 * log(e) land a few ulps above an integer
    return int(math.ceil(x * (1.0 - 1e-12)))


def sample_thresholds(kappa: float, n: float, delta: float, c: Optional[float] = None) -> dict[str, int]:
    """Required numbers of sampled patterns, each rounded up.

    Keys
    ----
    exact_fit
        ``2 kappa log(n / delta)``: sampled patterns interpolate any labels.
    l2_concentration
        ``12 kappa log(2n / delta)``: the sampled Gram matrix keeps half of
        the smallest expected eigenvalue.
    gated_upper
        ``8 kappa log(n / delta)``: the sampled gated optimum obeys the
        expected-Gram upper bound and the sandwich.
    width_floor
        ``320 (sqrt(c) + 1)^2 log(n / delta)``: network width for the
        end-to-end algorithm (only with ``c``).
    kappa_free_sandwich
        ``160 (sqrt(c) + 1)^2 log(n / delta)``: the sandwich with the
        condition number replaced by its random-data bound (only with ``c``).
    """
    if not 0 < delta < 1:
        raise PreconditionError("delta must lie in (0, 1)")
    if not kappa > 0:
        raise PreconditionError("kappa must be positive")
    out = {
        "exact_fit": _ceil(2.0 * kappa * math.log(n / delta)),
        "l2_concentration": _ceil(12.0 * kappa * math.log(2.0 * n / delta)),
        "gated_upper": _ceil(8.0 * kappa * math.log(n / delta)),
    }
    if c is not None:
        r = (math.sqrt(float(c)) + 1.0) ** 2
        out["width_floor"] = _ceil(320.0 * r * math.log(n / delta))
        out["kappa_free_sandwich"] = _ceil(160.0 * r * math.log(n / delta))
    return out


def relative_gap_factors(kappa: Optional[float], G: float, c: float) -> dict[str, Optional[float]]:
    """Relative sandwich factors ``sqrt(2 kappa) / G`` and ``(2 sqrt(10) / G)(sqrt(c) + 1)``."""
    if not G > 0:
        return {"condition_number": None, "aspect_ratio": None}
    return {
        "condition_number": None if kappa is None else math.sqrt(2.0 * kappa) / G,
        "aspect_ratio": 2.0 * math.sqrt(10.0) / G * (math.sqrt(c) + 1.0),
    }


def kappa_bounds(c: float) -> dict[str, float]:
    """Two constants for the random-data bound on ``kappa``.

    ``tight`` uses ``10 sqrt(2)`` and ``loose`` uses ``20``; the
    verification checks test the looser one and report both.
    """
    r = (math.sqrt(c) + 1.0) ** 2
    return {"tight": 10.0 * math.sqrt(2.0) * r, "loose": 20.0 * r}


def sharpness_bound(c: float, n: int) -> float:
    """``1 + 80 c^2 sqrt(log(2n))``, the random-data bound on cone sharpness."""
    return 1.0 + 80.0 * c * c * math.sqrt(math.log(2.0 * n))


def width_factor(c: float, n: int) -> float:
    """``2 sqrt(20) (sqrt(c) + 1) (1 + 80 c^2 sqrt(log 2n))``: relative gap of the
    sampled cone relaxation to the full convex optimum."""
    return 2.0 * math.sqrt(20.0) * (math.sqrt(c) + 1.0) * sharpness_bound(c, n)


def gram_summary(ds: Dataset, ps=None) -> GramSummary:
    M = expected_gram(ds)
    lo, hi, gram_max = _extremes(ds, M)
    kappa = None if lo <= SINGULAR_RTOL * hi else gram_max / lo
    return GramSummary(
        M=M,
        M_sampled=None if ps is None else sampled_gram(ds, ps),
        lambda_min_M=lo,
        lambda_max_gram=gram_max,
        kappa=kappa,
        per_pattern_energies=None if ps is None else pattern_energies(ds, ps),
    )


def bound_report(
    ds: Dataset,
    ps_for_max,
    ps_sampled=None,
    *,
    delta: float = 0.1,
    maxcut: Optional[bool] = None,
    exact: Optional[bool] = None,
) -> BoundReport:
    """Collect every bound for one dataset into a :class:`BoundReport`.

    ``ps_for_max`` supplies the maximum in ``G`` (exact only for a full
    enumeration); ``ps_sampled`` (default ``ps_for_max``) defines the
    sampled Gram matrix of the tighter factor. The MAX-CUT value is
    computed when ``maxcut`` is true, or by default when ``n <= 20``.
    """
    M = expected_gram(ds)
    lo, hi, gram_max = _extremes(ds, M)
    singular = lo <= SINGULAR_RTOL * hi
    kappa = None if singular else gram_max / lo
    upper = None if singular else math.sqrt(2.0) * ds.beta * float(np.linalg.norm(ds.y)) / math.sqrt(lo)
    lower = bound_lower_full(ds, ps_for_max, exact=exact)
    tighter = bound_tighter_factor(ds, ps_for_max if ps_sampled is None else ps_sampled, ps_for_max=ps_for_max, exact=exact)
    want_maxcut = ds.n <= MAX_MAXCUT_N if maxcut is None else maxcut
    thresholds = {} if kappa is None else sample_thresholds(kappa, ds.n, delta, float(ds.c))
    g_label = "full arrangement" if lower.g_is_exact else "sampled patterns (heuristic)"
    return BoundReport(
        lambda_max_gram=gram_max,
        lambda_min_M=lo,
        kappa=kappa,
        G=lower.G,
        upper_gated=upper,
        lower_full=lower.value,
        tighter_upper_factor=tighter.value,
        maxcut_value=bound_maxcut(ds) if want_maxcut else None,
        sample_thresholds=thresholds,
        g_is_exact=lower.g_is_exact,
        sources={
            "upper_gated": "expected-Gram upper bound on the sampled gated optimum",
            "lower_full": f"dual lower bound on the full gated optimum, G over {g_label}",
            "tighter_upper_factor": f"sampled-Gram relative factor, G over {g_label}",
            "maxcut_value": "exhaustive binary quadratic maximum",
            "sample_thresholds": f"sample-count requirements at delta={delta}",
        },
    )
