"""Shared domain types, seeded data generation and text persistence."""

from __future__ import annotations

import dataclasses
import json
import math
from fractions import Fraction
from pathlib import Path
from typing import Any, Optional

import numpy as np

__all__ = [
    "RelugapError",
    "LoadError",
    "DimensionMismatchError",
    "PreconditionError",
    "SizeGuardError",
    "Dataset",
    "SolverConfig",
    "BoundReport",
    "LABEL_MODES",
    "generate_dataset",
    "planted_teacher",
    "save_dataset",
    "load_dataset",
    "save_report",
    "load_report",
    "to_jsonable",
    "UNDEFINED",
]

UNDEFINED = "undefined"
LABEL_MODES = ("random_gaussian", "planted_network", "file")


class RelugapError(Exception):
    """Base class for all package errors."""


class LoadError(RelugapError, ValueError):
    """A file could not be read or does not follow the expected layout."""


class DimensionMismatchError(LoadError):
    """Declared and actual sizes disagree."""


class PreconditionError(RelugapError, ValueError):
    """An operation was called on inputs outside its domain."""


class SizeGuardError(RelugapError, ValueError):
    """An exhaustive routine was asked to run beyond its size guard."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclasses.dataclass(frozen=True, eq=False)
class Dataset:
    """Training data ``(X, y)`` together with the weight-decay strength.

    ``X`` is stored as an ``(n, d)`` float64 array and ``y`` as an ``(n,)``
    array; both are read-only copies. The aspect ratio ``c = n / d`` is
    always recomputed from the shapes.
    """

    X: np.ndarray
    y: np.ndarray
    beta: float = 0.0

    def __post_init__(self):
        X = _freeze(self.X)
        y = _freeze(self.y).reshape(-1)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise PreconditionError(f"X must be a non-empty matrix, got shape {X.shape}")
        if y.shape[0] != X.shape[0]:
            raise DimensionMismatchError(
                f"y has {y.shape[0]} entries but X has {X.shape[0]} rows"
            )
        if not (np.isfinite(X).all() and np.isfinite(y).all()):
            raise PreconditionError("X and y must be finite")
        beta = float(self.beta)
        if not beta >= 0.0:
            raise PreconditionError(f"beta must be nonnegative, got {self.beta}")
        zero_rows = np.flatnonzero(~X.any(axis=1))
        if zero_rows.size:
            raise PreconditionError(f"X has zero rows at indices {zero_rows.tolist()}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "beta", beta)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def c(self) -> Fraction:
        return Fraction(self.n, self.d)

    def replace(self, **changes) -> "Dataset":
        return dataclasses.replace(self, **changes)

    def equals(self, other: "Dataset") -> bool:
        """Bit-exact equality of all fields."""
        return (
            self.X.shape == other.X.shape
            and np.array_equal(self.X, other.X)
            and np.array_equal(self.y, other.y)
            and self.beta == other.beta
        )


@dataclasses.dataclass(frozen=True)
class SolverConfig:
    tol_kkt: float = 1e-8
    max_iters: int = 20000
    step_rule: str = "fixed"
    seed: int = 0

    def __post_init__(self):
        if not self.tol_kkt > 0:
            raise PreconditionError("tol_kkt must be positive")
        if self.max_iters < 1:
            raise PreconditionError("max_iters must be at least 1")
        if self.step_rule not in ("fixed", "backtracking"):
            raise PreconditionError(f"unknown step_rule {self.step_rule!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise PreconditionError("seed must be a 64-bit unsigned integer")


@dataclasses.dataclass
class BoundReport:
    """Every certified-gap quantity computed for one dataset.

    Optional values are ``None`` when undefined (for example ``kappa``
    when the expected Gram matrix is singular); they serialize as the
    string ``"undefined"``. ``sources`` names the result each bound comes
    from and ``g_is_exact`` records whether ``G`` was computed over the
    full enumerated arrangement or only over a sample.
    """

    lambda_max_gram: float
    lambda_min_M: float
    kappa: Optional[float]
    G: float
    upper_gated: Optional[float]
    lower_full: float
    tighter_upper_factor: Optional[float]
    maxcut_value: Optional[float] = None
    sample_thresholds: dict = dataclasses.field(default_factory=dict)
    g_is_exact: bool = False
    sources: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.upper_gated is not None and self.upper_gated < 0:
            raise PreconditionError("upper_gated must be nonnegative")
        if self.G > 0 and self.lower_full < 0:
            raise PreconditionError("lower_full must be nonnegative when G > 0")

    @classmethod
    def from_dict(cls, data: dict) -> "BoundReport":
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: _from_jsonable(v) for k, v in data.items() if k in names}
        kwargs["sample_thresholds"] = dict(data.get("sample_thresholds", {}))
        kwargs["sources"] = dict(data.get("sources", {}))
        return cls(**kwargs)


# -- generation ---------------------------------------------------------------


def _streams(seed: int, count: int) -> list[np.random.Generator]:
    children = np.random.SeedSequence(int(seed)).spawn(count)
    return [np.random.default_rng(s) for s in children]


def _gaussian_matrix(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    X = rng.standard_normal((n, d))
    # zero rows have probability zero, but the contract forbids them outright
    while True:
        bad = ~X.any(axis=1)
        if not bad.any():
            return X
        X[bad] = rng.standard_normal((int(bad.sum()), d))


def planted_teacher(d: int, hidden: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Teacher weights ``(U, alpha)`` used by the ``planted_network`` label mode.

    ``U`` has shape ``(hidden, d)``; entries of both arrays are standard
    normal. The same ``seed`` given to :func:`generate_dataset` reproduces
    the teacher that produced the labels.
    """
    rng = _streams(seed, 2)[1]
    U = rng.standard_normal((hidden, d))
    alpha = rng.standard_normal(hidden)
    return U, alpha


def generate_dataset(
    n: int,
    d: int,
    beta: float = 0.0,
    label_mode: str = "random_gaussian",
    seed: int = 0,
    *,
    hidden: int = 2,
    label_path: str | Path | None = None,
) -> Dataset:
    """Draw ``X`` with i.i.d. standard normal entries and attach labels.

    Parameters
    ----------
    n, d : int
        Number of samples and features.
    beta : float
        Weight-decay strength stored on the dataset.
    label_mode : {"random_gaussian", "planted_network", "file"}
        ``random_gaussian`` draws ``y ~ N(0, I_n)``; ``planted_network``
        evaluates a random ReLU network with ``hidden`` units on ``X`` (see
        :func:`planted_teacher`); ``file`` reads ``n`` label values from
        ``label_path``.
    seed : int
        Seed of the generator; ``X`` and the labels use independent child
        streams of it.
    """
    if n < 1 or d < 1:
        raise PreconditionError("n and d must be positive")
    if label_mode not in LABEL_MODES:
        raise PreconditionError(f"unknown label_mode {label_mode!r}")
    x_rng, label_rng = _streams(seed, 2)
    X = _gaussian_matrix(x_rng, n, d)
    if label_mode == "random_gaussian":
        y = label_rng.standard_normal(n)
    elif label_mode == "planted_network":
        if hidden < 1:
            raise PreconditionError("planted network needs at least one hidden unit")
        U, alpha = planted_teacher(d, hidden, seed)
        y = np.maximum(X @ U.T, 0.0) @ alpha
    else:
        if label_path is None:
            raise LoadError("label_mode='file' requires label_path")
        y = _read_labels(Path(label_path), n)
    return Dataset(X, y, beta)


def _read_labels(path: Path, n: int) -> np.ndarray:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise LoadError(f"cannot read label file {path}: {exc}") from exc
    tokens = text.replace(",", " ").split()
    try:
        y = np.array([float(t) for t in tokens])
    except ValueError as exc:
        raise LoadError(f"malformed label file {path}: {exc}") from exc
    if y.shape[0] != n:
        raise DimensionMismatchError(f"label file {path} has {y.shape[0]} values, expected {n}")
    return y


# -- persistence --------------------------------------------------------------


def _fmt(x: float) -> str:
    # repr of a Python float is the shortest string that round-trips exactly
    return repr(float(x))


def save_dataset(ds: Dataset, path: str | Path) -> None:
    """Write ``ds`` as comma-separated text.

    Layout: a header line ``n,d,beta``, then ``n`` rows of ``d`` entries of
    ``X``, then a single line with the ``n`` labels.
    """
    lines = [f"{ds.n},{ds.d},{_fmt(ds.beta)}"]
    lines.extend(",".join(_fmt(v) for v in row) for row in ds.X)
    lines.append(",".join(_fmt(v) for v in ds.y))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise LoadError(f"cannot read dataset {path}: {exc}") from exc
    lines = [ln.strip() for ln in raw.splitlines() if ln.strip()]
    if not lines:
        raise LoadError(f"{path} is empty")
    try:
        n_s, d_s, beta_s = lines[0].split(",")
        n, d, beta = int(n_s), int(d_s), float(beta_s)
    except ValueError as exc:
        raise LoadError(f"{path}: header must be 'n,d,beta', got {lines[0]!r}") from exc
    if n < 1 or d < 1:
        raise LoadError(f"{path}: n and d must be positive")
    body = lines[1:]
    if len(body) != n + 1:
        raise DimensionMismatchError(
            f"{path}: header declares {n} rows plus a label line, found {len(body)} lines"
        )
    try:
        rows = [[float(v) for v in ln.split(",")] for ln in body[:n]]
        y = np.array([float(v) for v in body[n].split(",")])
    except ValueError as exc:
        raise LoadError(f"{path}: non-numeric entry ({exc})") from exc
    if any(len(r) != d for r in rows):
        raise DimensionMismatchError(f"{path}: every row must have {d} entries")
    if y.shape[0] != n:
        raise DimensionMismatchError(f"{path}: label line has {y.shape[0]} entries, expected {n}")
    X = np.array(rows, dtype=np.float64)
    try:
        return Dataset(X, y, beta)
    except PreconditionError as exc:
        raise LoadError(f"{path}: {exc}") from exc


def to_jsonable(obj: Any) -> Any:
    """Convert dataclasses, arrays and special floats into plain JSON values."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, Fraction):
        return f"{obj.numerator}/{obj.denominator}"
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isnan(x):
            return UNDEFINED
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if obj is None:
        return UNDEFINED
    return obj


def _from_jsonable(v: Any) -> Any:
    if v == UNDEFINED:
        return None
    if v == "inf":
        return math.inf
    if v == "-inf":
        return -math.inf
    return v


def save_report(report: Any, path: str | Path) -> None:
    """Serialize a report (dataclass or mapping) as indented UTF-8 JSON."""
    payload = to_jsonable(report)
    if dataclasses.is_dataclass(report):
        payload = {"type": type(report).__name__, **payload}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def load_report(path: str | Path) -> Any:
    """Read a report written by :func:`save_report`.

    Bound reports come back as :class:`BoundReport`; anything else is
    returned as a dictionary with ``"undefined"`` markers mapped to ``None``.
    """
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise LoadError(f"cannot read report {path}: {exc}") from exc
    if isinstance(data, dict) and data.get("type") == "BoundReport":
        return BoundReport.from_dict(data)
    return data
