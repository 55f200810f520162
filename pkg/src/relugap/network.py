"""The nonconvex two-layer ReLU network and its link to the convex relaxation.

The training objective with weight decay is

    L(U, alpha) = 1/2 || (X U^T)_+ alpha - y ||^2 + beta/2 (||U||_F^2 + ||alpha||^2).

A cone-feasible convex solution maps to a network with the same loss:
each nonzero ``u_i`` becomes the neuron ``(u_i / sqrt||u_i||, sqrt||u_i||)``
and each nonzero ``v_i`` the neuron ``(v_i / sqrt||v_i||, -sqrt||v_i||)``.
"""

from __future__ import annotations

import csv
import dataclasses
from pathlib import Path
from typing import Union

import numpy as np
from scipy import optimize

from .arrangements import PatternSet
from .core import (
    Dataset,
    DimensionMismatchError,
    LoadError,
    PreconditionError,
    RelugapError,
    _fmt,
)
from .solvers import ConeSolution

__all__ = [
    "DIVERGENCE_FACTOR",
    "STATIONARY_RTOL",
    "TrainingDivergedError",
    "NetworkParams",
    "TrainTrace",
    "init_network",
    "network_output",
    "network_loss",
    "network_gradient",
    "min_norm_subgradient",
    "activation_masks",
    "train_gd",
    "pattern_drift",
    "convex_to_network",
    "network_to_convex_patterns",
    "save_network",
    "load_network",
]

DIVERGENCE_FACTOR = 1e6
STATIONARY_RTOL = 1e-6
KINK_BAND = 1e-8
_MIN_STEP = 1e-20
_ARMIJO = 0.5


@dataclasses.dataclass
class NetworkParams:
    """Hidden weights ``U`` (one row per neuron) and output weights ``alpha``.

    A network produced from an all-zero convex solution has no neurons;
    every other constructor yields ``m >= 1``.
    """

    U: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        self.U = np.array(self.U, dtype=np.float64, ndmin=2)
        self.alpha = np.array(self.alpha, dtype=np.float64).reshape(-1)
        if self.U.shape[0] != self.alpha.shape[0]:
            raise DimensionMismatchError(
                f"{self.U.shape[0]} hidden weight rows but {self.alpha.shape[0]} output weights"
            )

    @property
    def m(self) -> int:
        return self.U.shape[0]

    @property
    def d(self) -> int:
        return self.U.shape[1]

    @property
    def neurons(self) -> list[tuple[np.ndarray, float]]:
        return [(u, float(a)) for u, a in zip(self.U, self.alpha)]

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.U.copy(), self.alpha.copy())


@dataclasses.dataclass
class TrainTrace:
    """Record of one gradient-descent run.

    Attributes
    ----------
    losses : ndarray
        Objective before the first step and after every step.
    drift : ndarray
        Fraction of activation indicators that differ from the initial
        ones, aligned with ``losses``.
    snapshot_steps : list of int
    pattern_snapshots : list of ndarray of bool, shape (m, n)
        Activation masks ``X u_j >= 0`` at ``snapshot_steps``; the initial
        and final states are always included.
    drift_fraction : float
        Drift between the first and last snapshot.
    converged : bool
        The stationarity test ``||g|| <= 1e-6 (1 + loss)`` on the
        minimal-norm subgradient was met.
    grad_norm : float
        Norm of the minimal-norm subgradient at the final parameters.
    status : str
        ``"converged"``, ``"max_steps"`` or ``"stalled"`` (no step length
        passed the line search).
    """

    losses: np.ndarray
    drift: np.ndarray
    snapshot_steps: list
    pattern_snapshots: list
    drift_fraction: float
    converged: bool
    grad_norm: float
    status: str

    @property
    def steps(self) -> int:
        return len(self.losses) - 1

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "drift"])
            for k, (loss, dr) in enumerate(zip(self.losses, self.drift)):
                w.writerow([k, repr(float(loss)), repr(float(dr))])


class TrainingDivergedError(RelugapError):
    """The loss exceeded ``1e6`` times its initial value; ``trace`` holds the run so far."""

    def __init__(self, message: str, trace: TrainTrace):
        super().__init__(message)
        self.trace = trace


def init_network(m: int, d: int, seed) -> NetworkParams:
    """Entries of ``U`` and ``alpha`` i.i.d. ``N(0, 1/m)``."""
    if m < 1 or d < 1:
        raise PreconditionError("m and d must be positive")
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(m)
    U = rng.standard_normal((m, d)) * scale
    alpha = rng.standard_normal(m) * scale
    return NetworkParams(U, alpha)


def _check(ds: Dataset, p: NetworkParams) -> None:
    if p.m and p.d != ds.d:
        raise DimensionMismatchError(f"network has input dimension {p.d}, data has {ds.d}")


def activation_masks(X: np.ndarray, U: np.ndarray) -> np.ndarray:
    """``(m, n)`` boolean array of ``X u_j >= 0``."""
    return (U @ X.T) >= 0


def network_output(X: np.ndarray, p: NetworkParams) -> np.ndarray:
    if p.m == 0:
        return np.zeros(X.shape[0])
    return np.maximum(X @ p.U.T, 0.0) @ p.alpha


def network_loss(ds: Dataset, p: NetworkParams) -> float:
    _check(ds, p)
    r = network_output(ds.X, p) - ds.y
    reg = float((p.U**2).sum() + (p.alpha**2).sum())
    return 0.5 * float(r @ r) + 0.5 * ds.beta * reg


def _loss_and_grad(X, y, beta, U, alpha):
    H = X @ U.T
    A = np.maximum(H, 0.0)
    r = A @ alpha - y
    loss = 0.5 * float(r @ r) + 0.5 * beta * float((U**2).sum() + (alpha**2).sum())
    # ReLU derivative taken as 0 at exactly 0
    gU = ((H > 0) * r[:, None] * alpha).T @ X + beta * U
    ga = A.T @ r + beta * alpha
    return loss, gU, ga


def network_gradient(ds: Dataset, p: NetworkParams) -> tuple[np.ndarray, np.ndarray]:
    """Gradient ``(dL/dU, dL/dalpha)`` away from activation boundaries."""
    _check(ds, p)
    _, gU, ga = _loss_and_grad(ds.X, ds.y, ds.beta, p.U, p.alpha)
    return gU, ga


def _box_least_squares(A: np.ndarray, b: np.ndarray, max_iter: int = 50) -> np.ndarray:
    """``argmin ||A s + b||`` over ``0 <= s <= 1``.

    Primal-dual active sets on the normal equations, which settle in a
    few iterations for the handful of columns met here; falls back to
    :func:`scipy.optimize.lsq_linear` when the active sets cycle, a
    reduced system is singular, or the result fails the optimality test.
    """
    Q, q = A.T @ A, A.T @ b
    k = q.shape[0]
    lo, hi = q >= 0, np.zeros(k, dtype=bool)
    tol = 1e-12 * (np.abs(Q).max() + np.abs(q).max() + 1e-300)
    for _ in range(max_iter):
        free = ~(lo | hi)
        s = hi.astype(np.float64)
        if free.any():
            f = np.flatnonzero(free)
            rhs = -(q[f] + Q[f] @ s)
            try:
                s[f] = np.linalg.solve(Q[f][:, f], rhs)
            except np.linalg.LinAlgError:
                break
        g = Q @ s + q
        new_lo = (free & (s < 0)) | (lo & (g >= 0))
        new_hi = (free & (s > 1)) | (hi & (g <= 0))
        if np.array_equal(new_lo, lo) and np.array_equal(new_hi, hi):
            # the free block solved its equations; confirm it stayed inside the box
            if s.min() >= -1e-12 and s.max() <= 1 + 1e-12 and np.abs(g[free]).max(initial=0.0) <= 1e3 * tol:
                return np.clip(s, 0.0, 1.0)
            break
        lo, hi = new_lo, new_hi
    return np.clip(optimize.lsq_linear(A, -b, bounds=(0.0, 1.0), method="bvls").x, 0.0, 1.0)


def _min_norm(X, beta, U, alpha, H, r, gU, band):
    """Replace each neuron's gradient by the smallest subgradient when some
    samples lie within ``band`` (relative) of its hyperplane.

    The ReLU slope of such a sample may be anything in ``[0, 1]``; choosing
    the slopes by bounded least squares gives the minimal-norm element of
    the neuron's subdifferential.
    """
    scale = band * np.linalg.norm(X, axis=1)[:, None] * np.linalg.norm(U, axis=1)[None, :]
    near = (np.abs(H) <= scale) & (scale > 0)
    if not near.any():
        return gU
    cols = np.flatnonzero(near.any(axis=0))
    # slopes of the near samples are free; the rest follow the sign of H
    removed = ((H[:, cols] > 0) & near[:, cols]) * r[:, None]
    base = gU[cols] - alpha[cols, None] * (removed.T @ X)
    counts = near[:, cols].sum(axis=0)
    out = gU.copy()
    single = counts == 1
    if single.any():
        # one free slope: clip the scalar least-squares step
        idx = np.flatnonzero(single)
        rows = near[:, cols[idx]].argmax(axis=0)
        a = (alpha[cols[idx]] * r[rows])[:, None] * X[rows]
        aa = (a * a).sum(axis=1)
        t = np.where(aa > 0, -(a * base[idx]).sum(axis=1) / np.where(aa > 0, aa, 1.0), 0.0)
        out[cols[idx]] = base[idx] + np.clip(t, 0.0, 1.0)[:, None] * a
    for i in np.flatnonzero(~single):
        j = cols[i]
        k = near[:, j]
        A = (alpha[j] * r[k])[None, :] * X[k].T
        out[j] = base[i] + A @ _box_least_squares(A, base[i])
    return out


def min_norm_subgradient(ds: Dataset, p: NetworkParams, band: float = KINK_BAND) -> tuple[np.ndarray, np.ndarray]:
    """Smallest-norm subgradient ``(dU, dalpha)``.

    Equal to :func:`network_gradient` away from activation boundaries; for
    samples with ``|x_i . u_j| <= band ||x_i|| ||u_j||`` the ReLU slope is
    chosen in ``[0, 1]`` to minimize the norm of neuron ``j``'s block.
    """
    _check(ds, p)
    H = ds.X @ p.U.T
    r = np.maximum(H, 0.0) @ p.alpha - ds.y
    _, gU, ga = _loss_and_grad(ds.X, ds.y, ds.beta, p.U, p.alpha)
    return _min_norm(ds.X, ds.beta, p.U, p.alpha, H, r, gU, band), ga


def _loss(X, y, beta, U, alpha):
    r = np.maximum(X @ U.T, 0.0) @ alpha - y
    return 0.5 * float(r @ r) + 0.5 * beta * float((U**2).sum() + (alpha**2).sum())


def train_gd(
    ds: Dataset,
    p0: NetworkParams,
    lr: Union[float, str] = "backtracking",
    steps: int = 1000,
    snapshot_every: int = 0,
    *,
    stop_at_stationary: bool = True,
) -> tuple[TrainTrace, NetworkParams]:
    """Full-batch (sub)gradient descent on the weight-decayed loss.

    Parameters
    ----------
    lr : float or "backtracking"
        A fixed step along the gradient (ReLU slope 0 at exactly 0), or
        Armijo backtracking (sufficient decrease with constant 1/2, step
        halved on failure and doubled after success) along the
        minimal-norm subgradient of :func:`min_norm_subgradient`, which
        makes the loss nonincreasing.
    steps : int
        Maximum number of steps.
    snapshot_every : int
        Store activation masks every this many steps (0 keeps only the
        first and last).
    stop_at_stationary : bool
        Stop once the minimal-norm subgradient satisfies
        ``||g|| <= 1e-6 (1 + loss)``.

    Raises
    ------
    TrainingDivergedError
        If the loss exceeds ``1e6`` times its initial value.
    """
    if steps < 1:
        raise PreconditionError("steps must be at least 1")
    _check(ds, p0)
    backtracking = isinstance(lr, str)
    if backtracking and lr != "backtracking":
        raise PreconditionError(f"unknown step rule {lr!r}")
    if not backtracking and not lr > 0:
        raise PreconditionError("learning rate must be positive")
    X, y, beta = ds.X, ds.y, ds.beta
    U, alpha = p0.U.copy(), p0.alpha.copy()
    m, n = U.shape[0], X.shape[0]
    denom = max(m * n, 1)

    def evaluate(U, alpha):
        H = X @ U.T
        A = np.maximum(H, 0.0)
        r = A @ alpha - y
        loss = 0.5 * float(r @ r) + 0.5 * beta * float((U**2).sum() + (alpha**2).sum())
        # ReLU derivative taken as 0 at exactly 0
        gU = ((H > 0) * r[:, None] * alpha).T @ X + beta * U
        ga = A.T @ r + beta * alpha
        gmin = _min_norm(X, beta, U, alpha, H, r, gU, KINK_BAND)
        return loss, (gmin if backtracking else gU), ga, float(np.sqrt((gmin**2).sum() + (ga**2).sum()))

    masks0 = activation_masks(X, U)
    snaps, snap_steps = [masks0], [0]
    loss, gU, ga, gnorm = evaluate(U, alpha)
    loss0 = loss
    losses, drift = [loss], [0.0]
    t = 1.0 if backtracking else float(lr)
    status = "max_steps"

    def make_trace(final_masks, gnorm, status):
        if snap_steps[-1] != len(losses) - 1:
            snaps.append(final_masks)
            snap_steps.append(len(losses) - 1)
        frac = float((snaps[-1] != snaps[0]).sum()) / denom
        return TrainTrace(
            np.array(losses), np.array(drift), list(snap_steps), list(snaps),
            frac, status == "converged", gnorm, status,
        )

    masks = masks0
    for k in range(1, steps + 1):
        if stop_at_stationary and gnorm <= STATIONARY_RTOL * (1.0 + loss):
            status = "converged"
            break
        if backtracking:
            gsq = float((gU**2).sum() + (ga**2).sum())
            while True:
                U_new, a_new = U - t * gU, alpha - t * ga
                new = _loss(X, y, beta, U_new, a_new)
                if new <= loss - _ARMIJO * t * gsq:
                    break
                t *= 0.5
                if t < _MIN_STEP:
                    break
            if t < _MIN_STEP:
                # no step length gives sufficient decrease; stay put rather than increase the loss
                t = _MIN_STEP
                status = "stalled"
                break
            U, alpha = U_new, a_new
            t *= 2.0
        else:
            U, alpha = U - t * gU, alpha - t * ga
        loss, gU, ga, gnorm = evaluate(U, alpha)
        masks = activation_masks(X, U)
        losses.append(loss)
        drift.append(float((masks != masks0).sum()) / denom)
        if snapshot_every and k % snapshot_every == 0:
            snaps.append(masks)
            snap_steps.append(k)
        if not np.isfinite(loss) or loss > DIVERGENCE_FACTOR * max(loss0, np.finfo(float).tiny):
            trace = make_trace(masks, float("nan"), "diverged")
            raise TrainingDivergedError(
                f"loss {loss:.3e} exceeded {DIVERGENCE_FACTOR:g} x initial {loss0:.3e} at step {k}",
                trace,
            )
    if status == "max_steps" and gnorm <= STATIONARY_RTOL * (1.0 + loss):
        status = "converged"
    return make_trace(masks, gnorm, status), NetworkParams(U, alpha)


def pattern_drift(trace: TrainTrace) -> float:
    """Fraction of (neuron, sample) indicators that differ between the first and last snapshot."""
    if len(trace.pattern_snapshots) < 2:
        raise PreconditionError("drift needs at least two snapshots")
    first, last = trace.pattern_snapshots[0], trace.pattern_snapshots[-1]
    return float((first != last).sum()) / max(first.size, 1)


def convex_to_network(sol: ConeSolution, ps=None) -> NetworkParams:
    """Map a cone-feasible convex solution to a balanced network with equal loss.

    Zero blocks emit no neuron, so the result has between 0 and ``2P``
    neurons. ``ps``, when given, must carry the same masks as ``sol``.

    Raises
    ------
    PreconditionError
        If the solution is not cone feasible; the loss identity relies on
        ``(X u_i)_+ = D_i X u_i``.
    """
    if not sol.cone_feasible:
        raise PreconditionError(
            f"solution violates its cones by {sol.cone_violation:.3e}; refusing to map"
        )
    if ps is not None:
        masks = ps.masks if isinstance(ps, PatternSet) else np.asarray(ps, dtype=bool)
        if not np.array_equal(masks, sol.masks):
            raise PreconditionError("pattern set does not match the solution")
    rows, alphas = [], []
    for W, sign in ((sol.U, 1.0), (sol.V, -1.0)):
        for w in W:
            nrm = float(np.linalg.norm(w))
            if nrm > 0:
                s = np.sqrt(nrm)
                rows.append(w / s)
                alphas.append(sign * s)
    d = sol.U.shape[1]
    U = np.array(rows).reshape(len(rows), d)
    return NetworkParams(U, np.array(alphas))


def network_to_convex_patterns(p: NetworkParams, ds: Dataset) -> PatternSet:
    """Deduplicated activation masks ``1[X u_j >= 0]`` of the neurons."""
    _check(ds, p)
    return PatternSet.from_masks(activation_masks(ds.X, p.U), provenance="network")


def save_network(p: NetworkParams, path: Union[str, Path]) -> None:
    """Comma-separated text: header ``m,d``, ``m`` rows of ``U``, one line of ``alpha``."""
    lines = [f"{p.m},{p.d}"]
    lines.extend(",".join(_fmt(v) for v in row) for row in p.U)
    lines.append(",".join(_fmt(v) for v in p.alpha))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_network(path: Union[str, Path]) -> NetworkParams:
    path = Path(path)
    try:
        lines = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines()]
    except OSError as exc:
        raise LoadError(f"cannot read network {path}: {exc}") from exc
    try:
        m, d = (int(v) for v in lines[0].split(","))
        U = np.array([[float(v) for v in ln.split(",")] for ln in lines[1 : m + 1]]).reshape(m, d)
        alpha_line = lines[m + 1] if len(lines) > m + 1 else ""
        alpha = np.array([float(v) for v in alpha_line.split(",")]) if alpha_line else np.zeros(0)
    except (ValueError, IndexError) as exc:
        raise LoadError(f"{path}: malformed network file ({exc})") from exc
    if alpha.shape[0] != m:
        raise DimensionMismatchError(f"{path}: expected {m} output weights, found {alpha.shape[0]}")
    return NetworkParams(U, alpha)
