"""Hyperplane arrangement patterns ``diag(1[Xg >= 0])``: sampling, enumeration, pairs.

A pattern is stored as a boolean mask over the ``n`` samples. A
:class:`PatternSet` keeps an ordered, duplicate-free stack of masks.
Every mask this module produces is a chamber of the arrangement: some
``u`` satisfies ``(2D - I) X u > 0`` strictly.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np
from scipy.optimize import linprog

from .core import Dataset, LoadError, PreconditionError, SizeGuardError

__all__ = [
    "PatternSet",
    "pattern_of",
    "draw_patterns",
    "sample_patterns",
    "enumerate_patterns",
    "paired_patterns",
    "chamber_witness",
    "is_realizable",
    "region_count_bound",
    "REALIZABILITY_EPS",
    "RETRY_FACTOR",
]

REALIZABILITY_EPS = 1e-9
RETRY_FACTOR = 50
MAX_ENUM_N = 20
MAX_ENUM_D = 6


def pattern_of(X: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Activation mask ``1[X g >= 0]``; ties count as active.

    ``g`` may be a single direction ``(d,)`` or a stack ``(k, d)``, in which
    case the result has shape ``(k, n)``.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim == 1:
        return X @ g >= 0
    return (g @ X.T) >= 0


@dataclasses.dataclass(frozen=True, eq=False)
class PatternSet:
    """Ordered collection of distinct activation masks.

    Attributes
    ----------
    masks : ndarray of bool, shape (P, n)
    provenance : str
        One of ``sampled``, ``enumerated``, ``paired``, ``explicit``.
    info : dict
        Provenance details, e.g. ``{"seed": 0, "count_requested": 10}``.
    pairs : tuple of (int, int), optional
        For ``paired`` sets, index pairs into ``masks`` whose masks differ
        in exactly one sample (the sample given by the pair's position).
    """

    masks: np.ndarray
    provenance: str = "explicit"
    info: dict = dataclasses.field(default_factory=dict)
    pairs: Optional[tuple] = None

    def __post_init__(self):
        m = np.array(self.masks, dtype=bool, copy=True)
        if m.ndim != 2:
            raise PreconditionError(f"masks must be a 2-D array, got shape {m.shape}")
        if m.shape[0] > 1 and np.unique(m, axis=0).shape[0] != m.shape[0]:
            raise PreconditionError("pattern set contains duplicate masks")
        m.setflags(write=False)
        object.__setattr__(self, "masks", m)

    @classmethod
    def from_masks(cls, masks: Iterable, provenance: str = "explicit", **info) -> "PatternSet":
        """Deduplicate ``masks`` keeping first occurrences in order."""
        arr = np.atleast_2d(np.asarray(masks, dtype=bool))
        return cls(_dedupe(arr), provenance, dict(info))

    @property
    def n(self) -> int:
        return self.masks.shape[1]

    def __len__(self) -> int:
        return self.masks.shape[0]

    def __iter__(self) -> Iterator[np.ndarray]:
        return iter(self.masks)

    def __getitem__(self, i):
        return self.masks[i]

    def prefix(self, k: int) -> "PatternSet":
        return PatternSet(self.masks[:k], self.provenance, dict(self.info))

    def union(self, other: "PatternSet") -> "PatternSet":
        return PatternSet.from_masks(np.vstack([self.masks, other.masks]), "explicit")

    def keys(self) -> list[str]:
        return ["".join("1" if b else "0" for b in m) for m in self.masks]

    def contains(self, mask) -> bool:
        mask = np.asarray(mask, dtype=bool)
        return bool((self.masks == mask).all(axis=1).any())

    def issubset(self, other: "PatternSet") -> bool:
        return set(self.keys()) <= set(other.keys())

    def to_text(self) -> str:
        header = "# provenance=" + self.provenance
        for k, v in sorted(self.info.items()):
            header += f" {k}={v}"
        return "\n".join([header, *self.keys()]) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PatternSet":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("#"):
            raise LoadError("pattern file must start with a '# provenance=...' header")
        fields = dict(tok.split("=", 1) for tok in lines[0][1:].split() if "=" in tok)
        provenance = fields.pop("provenance", "explicit")
        rows = lines[1:]
        if not rows:
            raise LoadError("pattern file holds no patterns")
        if len({len(r) for r in rows}) != 1 or any(set(r) - {"0", "1"} for r in rows):
            raise LoadError("patterns must be equal-length strings of 0/1")
        masks = np.array([[ch == "1" for ch in r] for r in rows], dtype=bool)
        return cls(masks, provenance, fields)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PatternSet":
        try:
            return cls.from_text(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise LoadError(f"cannot read pattern file {path}: {exc}") from exc


def _dedupe(masks: np.ndarray) -> np.ndarray:
    if masks.shape[0] <= 1:
        return masks
    _, first = np.unique(masks, axis=0, return_index=True)
    return masks[np.sort(first)]


# -- sampling -----------------------------------------------------------------


def draw_patterns(ds: Dataset, count: int, seed: int) -> np.ndarray:
    """``count`` i.i.d. Gaussian-gate masks, duplicates kept, shape ``(count, n)``.

    This is the raw sampling model: ``g_k ~ N(0, I_d)`` drawn in order from
    ``numpy.random.default_rng(seed)``. :func:`sample_patterns` consumes the
    same stream, so its output is the first-occurrence deduplication of a
    long enough raw draw.
    """
    if count < 1:
        raise PreconditionError("count must be positive")
    rng = np.random.default_rng(seed)
    return pattern_of(ds.X, rng.standard_normal((count, ds.d)))


def sample_patterns(ds: Dataset, count: int, seed: int, *, chunk: int = 256) -> PatternSet:
    """Up to ``count`` distinct masks from i.i.d. Gaussian gates.

    Draws stop once ``count`` distinct masks are found or after
    ``RETRY_FACTOR * count`` draws; a shortfall is recorded in
    ``info["count_found"]`` rather than raised. Output for a smaller
    ``count`` is always a prefix of the output for a larger one under the
    same seed.
    """
    if count < 1:
        raise PreconditionError("count must be positive")
    rng = np.random.default_rng(seed)
    budget = RETRY_FACTOR * count
    seen: set[bytes] = set()
    kept: list[np.ndarray] = []
    drawn = 0
    while len(kept) < count and drawn < budget:
        k = min(chunk, budget - drawn)
        block = pattern_of(ds.X, rng.standard_normal((k, ds.d)))
        drawn += k
        for mask in block:
            key = np.packbits(mask).tobytes()
            if key not in seen:
                seen.add(key)
                kept.append(mask)
                if len(kept) == count:
                    break
    masks = np.array(kept, dtype=bool).reshape(len(kept), ds.n)
    return PatternSet(
        masks,
        "sampled",
        {"seed": seed, "count_requested": count, "count_found": len(kept)},
    )


# -- realizability ------------------------------------------------------------


def chamber_witness(X: np.ndarray, mask, eps: float = REALIZABILITY_EPS) -> Optional[np.ndarray]:
    """A direction ``u`` strictly inside the chamber of ``mask``, or ``None``.

    Solves ``max t`` subject to ``s_j x_j.u / ||x_j|| >= t``, ``|u|_inf <= 1``,
    ``t <= 1`` with signs ``s = 2 mask - 1``; the chamber is nonempty iff
    the optimal margin exceeds ``eps``.
    """
    X = np.asarray(X, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    k, d = X.shape
    if k == 0:
        return np.zeros(d)
    signs = np.where(mask, 1.0, -1.0)
    G = signs[:, None] * X / np.linalg.norm(X, axis=1)[:, None]
    # variables (u, t); constraint -G u + t <= 0
    A_ub = np.hstack([-G, np.ones((k, 1))])
    cost = np.zeros(d + 1)
    cost[-1] = -1.0
    bounds = [(-1.0, 1.0)] * d + [(None, 1.0)]
    res = linprog(cost, A_ub=A_ub, b_ub=np.zeros(k), bounds=bounds, method="highs")
    if res.status != 0 or -res.fun <= eps:
        return None
    return res.x[:d]


def is_realizable(X: np.ndarray, mask, eps: float = REALIZABILITY_EPS) -> bool:
    return chamber_witness(X, mask, eps) is not None


def region_count_bound(n: int, r: int) -> int:
    """Number of chambers of ``n`` central hyperplanes in general position in rank ``r``."""
    return 2 * sum(math.comb(n - 1, i) for i in range(r))


def enumerate_patterns(ds: Dataset) -> PatternSet:
    """All chambers of the arrangement of the rows of ``X``.

    Grows sign vectors one sample at a time. A feasible prefix comes with
    an interior witness whose own sign on the next row gives one feasible
    child for free; only the opposite child needs a linear program.
    Restricted to ``n <= 20`` and ``d <= 6``.
    """
    if ds.n > MAX_ENUM_N or ds.d > MAX_ENUM_D:
        raise SizeGuardError(
            f"exhaustive enumeration needs n <= {MAX_ENUM_N} and d <= {MAX_ENUM_D}, "
            f"got n={ds.n}, d={ds.d}"
        )
    X = ds.X
    # each frontier entry: (prefix mask, strict witness)
    frontier: list[tuple[np.ndarray, np.ndarray]] = [(np.zeros(0, dtype=bool), None)]
    for j in range(ds.n):
        nxt = []
        for prefix, u in frontier:
            if u is None:
                # empty prefix: both half-spaces of the first row are chambers
                w = X[j] / np.linalg.norm(X[j])
                nxt.append((np.append(prefix, True), w))
                nxt.append((np.append(prefix, False), -w))
                continue
            val = X[j] @ u
            scale = np.linalg.norm(X[j]) * np.linalg.norm(u)
            if abs(val) > 1e-7 * scale:
                free = val > 0
                nxt.append((np.append(prefix, free), u))
                other = np.append(prefix, not free)
                w = chamber_witness(X[: j + 1], other)
                if w is not None:
                    nxt.append((other, w))
            else:
                for bit in (True, False):
                    cand = np.append(prefix, bit)
                    w = chamber_witness(X[: j + 1], cand)
                    if w is not None:
                        nxt.append((cand, w))
        frontier = nxt
    masks = np.array([m for m, _ in frontier], dtype=bool)
    # lexicographic order on the 0/1 strings, largest first
    order = np.lexsort(masks.T[::-1].astype(int))[::-1]
    return PatternSet(masks[order], "enumerated", {"n": ds.n, "d": ds.d})


def paired_patterns(ds: Dataset, seed: int = 0, *, parallel_tol: float = 1e-10) -> PatternSet:
    """Adjacent chamber pairs that differ only in one sample each.

    For sample ``i`` pick ``c`` on the hyperplane ``x_i . c = 0`` off every
    other hyperplane, set ``eps = min_j |c.x_j| / (2 |x_i.x_j|)`` over rows
    not orthogonal to ``x_i``, and take the masks of ``c + eps x_i`` and
    ``c - eps x_i``. Masks are deduplicated across pairs (two pairs may
    share a chamber); ``pairs[i]`` holds the indices of pair ``i``.
    """
    X = ds.X
    n, d = X.shape
    unit = X / np.linalg.norm(X, axis=1)[:, None]
    if n > 1:
        cos = np.abs(unit @ unit.T)
        np.fill_diagonal(cos, 0.0)
        if (1.0 - cos).min() <= parallel_tol:
            i, j = np.unravel_index(np.argmax(cos), cos.shape)
            raise PreconditionError(f"rows {i} and {j} of X are parallel")
    rng = np.random.default_rng(seed)
    masks: list[np.ndarray] = []
    index: dict[bytes, int] = {}
    pairs = []

    def add(mask):
        key = np.packbits(mask).tobytes()
        if key not in index:
            index[key] = len(masks)
            masks.append(mask)
        return index[key]

    for i in range(n):
        xi = X[i]
        for _ in range(1000):
            g = rng.standard_normal(d)
            c = g - (g @ unit[i]) * unit[i]
            norm_c = np.linalg.norm(c)
            if norm_c == 0:
                continue
            c /= norm_c
            dots = X @ c
            others = np.arange(n) != i
            if np.all(np.abs(dots[others]) > 1e-8 * np.linalg.norm(X[others], axis=1)):
                break
        else:  # pragma: no cover - only for degenerate X
            raise PreconditionError(f"could not find a generic point on hyperplane {i}")
        cross = np.abs(X @ xi)
        sel = others & (cross > 0)
        eps = float(np.min(np.abs(dots[sel]) / (2.0 * cross[sel]))) if sel.any() else 1.0
        plus = pattern_of(X, c + eps * xi)
        minus = pattern_of(X, c - eps * xi)
        plus[i], minus[i] = True, False
        pairs.append((add(plus), add(minus)))
    return PatternSet(np.array(masks, dtype=bool), "paired", {"seed": seed}, tuple(pairs))
