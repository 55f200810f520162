"""Reproducible experiment drivers behind the command-line interface.

Every driver takes a plain dataclass config that round-trips through
JSON, derives all random streams from ``config.seed`` and returns data
(rows, dictionaries or reports), never plots.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence

import numpy as np

from .arrangements import (
    MAX_ENUM_D,
    MAX_ENUM_N,
    PatternSet,
    draw_patterns,
    enumerate_patterns,
    sample_patterns,
)
from .bounds import bound_report, sample_thresholds, width_factor
from .core import BoundReport, Dataset, PreconditionError, SolverConfig, generate_dataset, load_dataset
from .network import (
    TrainTrace,
    convex_to_network,
    init_network,
    network_loss,
    train_gd,
)
from .solvers import (
    block_gradients,
    mask_matrix,
    solve_cone_constrained,
    solve_gated,
)

__all__ = [
    "WidthSweepConfig",
    "PipelineConfig",
    "DriftConfig",
    "BoundsConfig",
    "CONFIG_TYPES",
    "config_from_dict",
    "load_config",
    "save_config",
    "derive_seed",
    "parallel_map",
    "beta_scale",
    "width_sweep",
    "sweep_is_monotone",
    "width_floor",
    "pipeline_patterns",
    "run_pipeline",
    "run_drift",
    "drift_rows",
    "run_bounds",
    "enumerable",
]


# -- configuration ------------------------------------------------------------------


class _Config:
    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}

    @classmethod
    def from_dict(cls, data: dict):
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(data) - set(names) - {"command"}
        if unknown:
            raise PreconditionError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
        kwargs = {}
        for k, v in data.items():
            if k == "command":
                continue
            if isinstance(v, list):
                v = tuple(v)
            kwargs[k] = v
        return cls(**kwargs)


@dataclasses.dataclass(frozen=True)
class WidthSweepConfig(_Config):
    """Objective against the number of sampled patterns for several ``beta``.

    ``beta`` values are ``beta_fractions`` times the smallest ``beta`` at
    which the zero solution is optimal on the largest pattern set.
    """

    n: int = 300
    d: int = 10
    label_mode: str = "planted_network"
    hidden: int = 2
    beta_fractions: tuple = (0.1, 0.2, 0.4)
    grid: tuple = (1, 2, 5, 10, 20, 30, 50, 100)
    seed: int = 0
    cone: bool = False
    tol_kkt: float = 1e-8

    def __post_init__(self):
        if not self.grid or any(int(g) < 1 for g in self.grid):
            raise PreconditionError("grid entries must be positive integers")
        if list(self.grid) != sorted(self.grid):
            raise PreconditionError("grid must be increasing")
        if any(not f > 0 for f in self.beta_fractions):
            raise PreconditionError("beta fractions must be positive")


@dataclasses.dataclass(frozen=True)
class PipelineConfig(_Config):
    """End-to-end algorithm: sample, solve the cone relaxation, map to a network.

    ``m`` defaults to the width floor ``320 (sqrt(c) + 1)^2 log(n / delta)``;
    ``ceil(m / 2)`` Gaussian gates are drawn and deduplicated.
    """

    n: int = 8
    d: int = 2
    beta: float = 0.1
    label_mode: str = "random_gaussian"
    seed: int = 0
    delta: float = 0.1
    m: Optional[int] = None
    compare_enumerated: bool = True

    def __post_init__(self):
        if self.m is not None and self.m < 2:
            raise PreconditionError("m must be at least 2")
        if not 0 < self.delta < 1:
            raise PreconditionError("delta must lie in (0, 1)")


@dataclasses.dataclass(frozen=True)
class DriftConfig(_Config):
    """Gradient descent from random initialization, tracking activation drift.

    ``data`` points to a dataset file; without it, Gaussian data with
    ``label_mode`` labels is generated per seed. ``beta = None`` keeps the
    file's value, or uses ``1e-3`` for generated data.
    """

    n: int = 200
    d: int = 50
    m: int = 100
    steps: int = 2000
    beta: Optional[float] = None
    lr: Any = "backtracking"
    snapshot_every: int = 100
    label_mode: str = "random_gaussian"
    seeds: tuple = (0,)
    data: Optional[str] = None


@dataclasses.dataclass(frozen=True)
class BoundsConfig(_Config):
    """Bound report for one dataset.

    The maximum inside ``G`` runs over the enumerated arrangement when
    ``n <= 20`` and ``d <= 6``, otherwise over ``sampled`` Gaussian-gate
    patterns (reported as heuristic). ``beta = None`` keeps the value
    stored in ``data``, or uses ``0.1`` for generated data.
    """

    n: int = 8
    d: int = 3
    beta: Optional[float] = None
    label_mode: str = "random_gaussian"
    seed: int = 0
    delta: float = 0.1
    sampled: int = 1000
    data: Optional[str] = None


CONFIG_TYPES = {
    "width-sweep": WidthSweepConfig,
    "pipeline": PipelineConfig,
    "drift": DriftConfig,
    "bounds": BoundsConfig,
}


def config_from_dict(command: str, data: dict):
    return CONFIG_TYPES[command].from_dict(data)


def load_config(path, command: str):
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise PreconditionError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise PreconditionError(f"config {path} must hold a JSON object")
    if data.get("command", command) != command:
        raise PreconditionError(f"config {path} is for {data['command']!r}, not {command!r}")
    return config_from_dict(command, data)


def save_config(cfg, path, command: str) -> None:
    payload = {"command": command, **cfg.to_dict()}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


# -- helpers -----------------------------------------------------------------------


_TAGS = {"patterns": 1, "network": 2, "oracle": 3, "labels": 4}


def derive_seed(seed: int, tag: str) -> int:
    """Independent 32-bit seed for one use of a master seed."""
    return int(np.random.SeedSequence([int(seed), _TAGS[tag]]).generate_state(1)[0])


def parallel_map(fn: Callable, items: Iterable, jobs: int = 1) -> list:
    """``[fn(x) for x in items]`` on up to ``jobs`` processes, in input order."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def enumerable(n: int, d: int) -> bool:
    return n <= MAX_ENUM_N and d <= MAX_ENUM_D


def beta_scale(ds: Dataset, ps) -> float:
    """``max_i ||X^T D_i y||``: the zero solution is optimal for ``beta`` at or above it."""
    g = block_gradients(ds.X, mask_matrix(ds, ps), ds.y)
    return float(np.linalg.norm(g, axis=1).max())


# -- width sweep -------------------------------------------------------------------


def width_sweep(cfg: WidthSweepConfig) -> list[dict]:
    """One row per (beta, pattern count) cell over a nested pattern grid."""
    ds = generate_dataset(cfg.n, cfg.d, 0.0, cfg.label_mode, cfg.seed, hidden=cfg.hidden)
    full = sample_patterns(ds, int(cfg.grid[-1]), derive_seed(cfg.seed, "patterns"))
    scale = beta_scale(ds, full)
    solver_cfg = SolverConfig(tol_kkt=cfg.tol_kkt)
    rows = []
    for frac in cfg.beta_fractions:
        beta = float(frac) * scale
        dsb = ds.replace(beta=beta)
        for count in cfg.grid:
            ps = full.prefix(int(count))
            g = solve_gated(dsb, ps, solver_cfg)
            row = {
                "beta_fraction": float(frac),
                "beta": beta,
                "P_requested": int(count),
                "P": len(ps),
                "gated_objective": g.objective,
                "gated_dual": g.dual_value,
                "gated_certified": bool(g.certified),
            }
            if cfg.cone:
                c = solve_cone_constrained(dsb, ps)
                row.update(cone_objective=c.objective, cone_dual=c.dual_value, cone_certified=bool(c.certified))
            rows.append(row)
    return rows


def sweep_is_monotone(rows: Sequence[dict], key: str = "gated") -> bool:
    """Objectives never exceed the previous cell's objective by more than its
    certified gap.

    Comparing the larger set's objective against the smaller set's
    objective plus its duality gap keeps the test rigorous at the solver
    tolerance.
    """
    by_beta: dict = {}
    for r in rows:
        by_beta.setdefault(r["beta"], []).append(r)
    for cells in by_beta.values():
        cells = sorted(cells, key=lambda r: r["P_requested"])
        for prev, cur in zip(cells, cells[1:]):
            slack = max(prev[f"{key}_objective"] - prev[f"{key}_dual"], 0.0)
            if cur[f"{key}_objective"] > prev[f"{key}_objective"] + slack + 1e-12 * abs(prev[f"{key}_objective"]):
                return False
    return True


# -- pipeline ----------------------------------------------------------------------


def width_floor(n: int, d: int, delta: float = 0.1) -> int:
    """``ceil(320 (sqrt(c) + 1)^2 log(n / delta))`` with ``c = n / d``."""
    return sample_thresholds(1.0, n, delta, n / d)["width_floor"]


def pipeline_patterns(ds: Dataset, m: int, seed: int) -> PatternSet:
    """Masks of ``ceil(m / 2)`` Gaussian gates, deduplicated in draw order."""
    raw = draw_patterns(ds, math.ceil(m / 2), seed)
    return PatternSet.from_masks(raw, "sampled", seed=seed, raw_draws=math.ceil(m / 2))


def run_pipeline(cfg: PipelineConfig, *, keep_solutions: bool = False) -> dict:
    """Run the end-to-end algorithm and compare with the enumerated optimum.

    The returned dictionary is deterministic given ``cfg`` apart from the
    ``wall_time`` entry. With ``keep_solutions`` the cone solutions and the
    dataset are attached under ``"_solutions"`` for further checks.
    """
    start = time.perf_counter()
    ds = generate_dataset(cfg.n, cfg.d, cfg.beta, cfg.label_mode, cfg.seed)
    floor = width_floor(cfg.n, cfg.d, cfg.delta)
    m = floor if cfg.m is None else int(cfg.m)
    ps = pipeline_patterns(ds, m, derive_seed(cfg.seed, "patterns"))
    sol = solve_cone_constrained(ds, ps)
    net = convex_to_network(sol, ps) if sol.cone_feasible else None
    loss = network_loss(ds, net) if net is not None else None
    c = cfg.n / cfg.d
    report = {
        "n": cfg.n,
        "d": cfg.d,
        "c": c,
        "beta": cfg.beta,
        "seed": cfg.seed,
        "m": m,
        "width_floor": floor,
        "raw_draws": math.ceil(m / 2),
        "P": len(ps),
        "convex_objective": sol.objective,
        "convex_dual": sol.dual_value,
        "certified": bool(sol.certified),
        "cone_violation": sol.cone_violation,
        "network_neurons": None if net is None else net.m,
        "network_loss": loss,
        "identity_rel_error": None if loss is None else abs(loss - sol.objective) / max(abs(sol.objective), 1e-300),
        "factor": width_factor(c, cfg.n),
    }
    solutions = [(ds, ps, sol)]
    if cfg.compare_enumerated and enumerable(cfg.n, cfg.d):
        full = enumerate_patterns(ds)
        opt = solve_cone_constrained(ds, full)
        solutions.append((ds, full, opt))
        report.update(
            P_full=len(full),
            full_objective=opt.objective,
            full_dual=opt.dual_value,
            full_certified=bool(opt.certified),
            # the sampled optimum can only be larger; the dual bound makes the check exact
            lower_holds=bool(opt.dual_value <= sol.objective),
            upper_holds=bool(sol.objective <= report["factor"] * opt.dual_value),
            ratio=sol.objective / opt.objective if opt.objective > 0 else None,
        )
    report["wall_time"] = time.perf_counter() - start
    if keep_solutions:
        report["_solutions"] = solutions
    return report


# -- drift -------------------------------------------------------------------------


def _drift_dataset(cfg: DriftConfig, seed: int) -> Dataset:
    if cfg.data is not None:
        ds = load_dataset(cfg.data)
        return ds if cfg.beta is None else ds.replace(beta=cfg.beta)
    beta = 1e-3 if cfg.beta is None else cfg.beta
    return generate_dataset(cfg.n, cfg.d, beta, cfg.label_mode, seed)


def _drift_one(args) -> tuple[int, TrainTrace]:
    cfg, seed = args
    ds = _drift_dataset(cfg, seed)
    p0 = init_network(cfg.m, ds.d, derive_seed(seed, "network"))
    lr = cfg.lr if isinstance(cfg.lr, str) else float(cfg.lr)
    trace, _ = train_gd(ds, p0, lr, cfg.steps, cfg.snapshot_every, stop_at_stationary=False)
    return seed, trace


def run_drift(cfg: DriftConfig, jobs: int = 1) -> list[tuple[int, TrainTrace]]:
    """One training trace per seed, in seed order."""
    return parallel_map(_drift_one, [(cfg, s) for s in cfg.seeds], jobs)


def drift_rows(results: Sequence[tuple[int, TrainTrace]], every: int = 1) -> list[dict]:
    rows = []
    for seed, tr in results:
        for k in range(0, len(tr.losses), max(every, 1)):
            rows.append({"seed": seed, "step": k, "loss": float(tr.losses[k]), "drift": float(tr.drift[k])})
        last = len(tr.losses) - 1
        if last % max(every, 1):
            rows.append({"seed": seed, "step": last, "loss": float(tr.losses[last]), "drift": float(tr.drift[last])})
    return rows


# -- bounds ------------------------------------------------------------------------


def run_bounds(cfg: BoundsConfig) -> BoundReport:
    if cfg.data is not None:
        ds = load_dataset(cfg.data)
        if cfg.beta is not None:
            ds = ds.replace(beta=cfg.beta)
    else:
        beta = 0.1 if cfg.beta is None else cfg.beta
        ds = generate_dataset(cfg.n, cfg.d, beta, cfg.label_mode, cfg.seed)
    if enumerable(ds.n, ds.d):
        ps = enumerate_patterns(ds)
    else:
        ps = sample_patterns(ds, cfg.sampled, derive_seed(cfg.seed, "patterns"))
    return bound_report(ds, ps, delta=cfg.delta)
