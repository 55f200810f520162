"""Statistical acceptance checks, one function per check.

Each check returns a :class:`CheckResult` with a pass flag, a one-line
summary and the raw counts. ``run_checks`` runs them in order; the solution
mapping check also re-examines every certified cone solution produced by
the checks before it.
"""

from __future__ import annotations

import dataclasses
import math
import time
from typing import Callable, Optional

import numpy as np
from scipy import optimize

from .arrangements import draw_patterns, enumerate_patterns, paired_patterns, PatternSet
from .bounds import compute_kappa, expected_gram, sample_thresholds, width_factor
from .core import Dataset, generate_dataset
from .decomposition import decompose_min_norm
from .experiments import (
    PipelineConfig,
    WidthSweepConfig,
    derive_seed,
    parallel_map,
    run_pipeline,
    width_sweep,
    sweep_is_monotone,
)
from .network import (
    convex_to_network,
    init_network,
    network_loss,
    network_to_convex_patterns,
    train_gd,
)
from .solvers import exact_fit, solve_cone_constrained, solve_gated, solve_gated_l2, solve_l2_iterative

__all__ = [
    "CheckResult",
    "CHECKS",
    "run_checks",
    "wedge_sharpness",
    "wedge_dataset",
    "epigraph_oracle",
    "check_width_plateau",
    "check_l2_closed_form",
    "check_exact_fit",
    "check_sandwich",
    "check_end_to_end_width",
    "check_gram_eigenvalue",
    "check_gram_monte_carlo",
    "check_decomposition",
    "check_mapping_identity",
    "check_drift",
    "check_stationary_chain",
]

DELTA = 0.1


@dataclasses.dataclass
class CheckResult:
    key: str
    passed: bool
    summary: str
    seconds: float = 0.0
    details: dict = dataclasses.field(default_factory=dict)

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.key}: {self.summary} ({self.seconds:.1f}s)"


# -- individual checks -------------------------------------------------------------


def check_width_plateau(max_drop: float = 0.10) -> CheckResult:
    """Gated objective on nested pattern sets at n=300, d=10: monotone and a
    small drop from 30 to 100 patterns for every beta."""
    cfg = WidthSweepConfig()
    rows = width_sweep(cfg)
    drops = {}
    for frac in cfg.beta_fractions:
        cells = {r["P_requested"]: r for r in rows if r["beta_fraction"] == frac}
        a, b = cells[30]["gated_objective"], cells[100]["gated_objective"]
        drops[frac] = (a - b) / a
    certified = all(r["gated_certified"] for r in rows)
    mono = sweep_is_monotone(rows)
    ok = certified and mono and all(v <= max_drop for v in drops.values())
    text = ", ".join(f"{k:g}: {v:.3f}" for k, v in drops.items())
    return CheckResult(
        "width_plateau", ok, f"monotone={mono} certified={certified} drop 30->100 by beta fraction {{{text}}}",
        details={"rows": rows, "drops": drops},
    )


def check_l2_closed_form(trials: int = 20, rtol: float = 1e-9) -> CheckResult:
    worst = 0.0
    for s in range(trials):
        rng = np.random.default_rng(derive_seed(s, "oracle"))
        n = int(rng.integers(3, 11))
        d = int(rng.integers(1, 5))
        ds = generate_dataset(n, d, float(rng.uniform(0.05, 2.0)), seed=s)
        ps = PatternSet.from_masks(draw_patterns(ds, int(rng.integers(1, 8)), derive_seed(s, "patterns")))
        closed = solve_gated_l2(ds, ps).value
        iterative, _ = solve_l2_iterative(ds, ps)
        worst = max(worst, abs(closed - iterative) / abs(closed))
    return CheckResult("l2_closed_form", worst <= rtol, f"worst relative difference {worst:.2e} over {trials} instances")


def check_exact_fit(trials: int = 100, need: int = 85) -> CheckResult:
    paired_ok = True
    hits = 0
    for s in range(trials):
        ds = generate_dataset(8, 4, seed=s)
        if s < 10:
            paired_ok &= exact_fit(ds, paired_patterns(ds, seed=s)).fit
        kappa = compute_kappa(ds)
        count = sample_thresholds(kappa, ds.n, DELTA)["exact_fit"]
        ps = PatternSet.from_masks(draw_patterns(ds, count, derive_seed(s, "patterns")))
        hits += exact_fit(ds, ps).fit
    return CheckResult(
        "exact_fit", paired_ok and hits >= need,
        f"paired patterns fit={paired_ok}; sampled fit in {hits}/{trials} (need {need})",
    )


def check_sandwich(trials: int = 100, need: int = 90, n: int = 10, d: int = 3, beta: float = 0.1) -> CheckResult:
    lower_all = True
    hits = 0
    for s in range(trials):
        ds = generate_dataset(n, d, beta, seed=s)
        full = enumerate_patterns(ds)
        kappa = compute_kappa(ds)
        count = sample_thresholds(kappa, n, DELTA)["gated_upper"]
        ps = PatternSet.from_masks(draw_patterns(ds, count, derive_seed(s, "patterns")))
        p_full = solve_gated(ds, full)
        p_samp = solve_gated(ds, ps)
        lower_all &= p_full.dual_value <= p_samp.objective
        bound = math.sqrt(2.0) * beta * float(np.linalg.norm(ds.y)) / math.sqrt(np.linalg.eigvalsh(expected_gram(ds))[0])
        # sampled objective against the full dual bound: conservative on both ends
        hits += p_samp.objective - p_full.dual_value <= bound
    return CheckResult(
        "sandwich", lower_all and hits >= need,
        f"lower side held on every instance={lower_all}; upper side in {hits}/{trials} (need {need})",
    )


def check_end_to_end_width(trials: int = 100, need: int = 90, collected: Optional[list] = None) -> CheckResult:
    lower_all = True
    hits = 0
    certified = 0
    for s in range(trials):
        rep = run_pipeline(PipelineConfig(n=8, d=2, beta=0.1, seed=s), keep_solutions=True)
        sols = rep.pop("_solutions")
        if collected is not None:
            collected.extend(sols)
        certified += rep["certified"] and rep["full_certified"]
        lower_all &= rep["lower_holds"]
        hits += rep["upper_holds"]
    return CheckResult(
        "end_to_end_width", lower_all and hits >= need,
        f"lower side exact on every trial={lower_all}; upper side in {hits}/{trials} (need {need}); "
        f"{certified} trials fully certified",
    )


def check_gram_eigenvalue(seeds: int = 50, d: int = 300, cs=(1, 2), need_frac: float = 0.9) -> CheckResult:
    freqs = {}
    for c in cs:
        hits = 0
        for s in range(seeds):
            ds = generate_dataset(c * d, d, seed=s)
            hits += np.linalg.eigvalsh(expected_gram(ds))[0] >= d / 10
        freqs[c] = hits / seeds
    ok = all(f >= need_frac for f in freqs.values())
    text = ", ".join(f"c={k}: {v:.2f}" for k, v in freqs.items())
    return CheckResult("gram_eigenvalue", ok, f"frequency of lambda_min >= d/10: {text}")


def check_gram_monte_carlo(draws: int = 10**6, sigmas: float = 3.0, seed: int = 0) -> CheckResult:
    ds = generate_dataset(4, 3, seed=seed)
    X = ds.X
    K = X @ X.T
    rng = np.random.default_rng(derive_seed(seed, "oracle"))
    total = np.zeros((4, 4))
    chunk = 100_000
    for start in range(0, draws, chunk):
        g = rng.standard_normal((min(chunk, draws - start), 3))
        A = (g @ X.T >= 0).astype(np.float64)
        total += A.T @ A
    mean_ind = total / draws
    # each sample of D X X^T D is K_ij times a 0/1 indicator
    se = np.abs(K) * np.sqrt(mean_ind * (1 - mean_ind) / draws)
    err = np.abs(K * mean_ind - expected_gram(ds))
    z = np.where(se > 0, err / np.where(se > 0, se, 1.0), np.where(err > 1e-12, np.inf, 0.0))
    return CheckResult("gram_monte_carlo", bool((z <= sigmas).all()), f"max entrywise error {z.max():.2f} standard errors")


def wedge_dataset(phi0: float, theta: float) -> Dataset:
    """Two samples whose all-ones cone is the wedge between rays at ``phi0`` and ``phi0 + theta``."""
    g1 = np.array([math.cos(phi0 + math.pi / 2), math.sin(phi0 + math.pi / 2)])
    g2 = np.array([math.cos(phi0 + theta - math.pi / 2), math.sin(phi0 + theta - math.pi / 2)])
    return Dataset(np.vstack([g1, g2]), np.zeros(2))


def _angle_gap(a: float, b: float) -> float:
    t = abs(a - b) % (2 * math.pi)
    return min(t, 2 * math.pi - t)


def wedge_sharpness(phi0: float, theta: float, psi: float) -> float:
    """Closed-form sharpness of the planar wedge of opening ``theta < pi`` at the
    unit vector of angle ``psi``.

    Outside the wedge and its negative, the best split puts ``u`` on the
    wedge ray nearest to ``w`` and ``-v`` on the nearest ray of the negated
    wedge; by the law of sines the norm sum is
    ``(sin a + sin b) / sin(a + b)`` for the two angular gaps ``a, b``.
    """
    rays = [phi0, phi0 + theta]
    inside = _angle_gap(psi, phi0 + theta / 2) <= theta / 2
    inside_neg = _angle_gap(psi, phi0 + theta / 2 + math.pi) <= theta / 2
    if inside or inside_neg:
        return 1.0
    a = min(_angle_gap(psi, r) for r in rays)
    b = min(_angle_gap(psi, r + math.pi) for r in rays)
    return (math.sin(a) + math.sin(b)) / math.sin(a + b)


def epigraph_oracle(ds: Dataset, D, w) -> float:
    """Minimum of ``||u|| + ||u - w||`` over ``u`` with ``u, u - w`` in the cone,
    by SLSQP on the smooth epigraph form from several starts.

    Both blocks are nonzero at the optimum unless ``w`` or ``-w`` is in the
    cone, so the squared-norm epigraph constraints are smooth there.
    """
    G = np.where(np.asarray(D, dtype=bool), 1.0, -1.0)[:, None] * ds.X
    Gw = G @ w
    if (Gw >= 0).all() or (Gw <= 0).all():
        return float(np.linalg.norm(w))
    d = ds.d
    cons = [
        {"type": "ineq", "fun": lambda z: G @ z[:d], "jac": lambda z: np.hstack([G, np.zeros((G.shape[0], 2))])},
        {"type": "ineq", "fun": lambda z: G @ z[:d] - Gw, "jac": lambda z: np.hstack([G, np.zeros((G.shape[0], 2))])},
        {"type": "ineq", "fun": lambda z: np.array([z[d] ** 2 - z[:d] @ z[:d], z[d + 1] ** 2 - (z[:d] - w) @ (z[:d] - w)]),
         "jac": lambda z: np.vstack([np.r_[-2 * z[:d], 2 * z[d], 0.0], np.r_[-2 * (z[:d] - w), 0.0, 2 * z[d + 1]]])},
    ]
    best = math.inf
    rng = np.random.default_rng(0)
    wn = float(np.linalg.norm(w))
    for _ in range(8):
        u0 = rng.standard_normal(d) * wn
        z0 = np.r_[u0, np.linalg.norm(u0) + wn, np.linalg.norm(u0 - w) + wn]
        res = optimize.minimize(
            lambda z: z[d] + z[d + 1], z0, jac=lambda z: np.r_[np.zeros(d), 1.0, 1.0],
            constraints=cons, bounds=[(None, None)] * d + [(0, None)] * 2,
            method="SLSQP", options={"ftol": 1e-14, "maxiter": 500},
        )
        u = res.x[:d]
        if (G @ u >= -1e-9 * wn).all() and (G @ (u - w) >= -1e-9 * wn).all():
            best = min(best, float(np.linalg.norm(u) + np.linalg.norm(u - w)))
    return best


def check_decomposition(
    planar: int = 50, spatial: int = 20, rtol: float = 1e-4, conic_oracle: Optional[Callable] = None
) -> CheckResult:
    """Planar instances against the closed form, ``d = 3`` instances against a
    conic oracle (SLSQP epigraph by default)."""
    conic_oracle = epigraph_oracle if conic_oracle is None else conic_oracle
    rng = np.random.default_rng(12345)
    worst2 = worst3 = 0.0
    min_sharp = math.inf
    for _ in range(planar):
        phi0 = rng.uniform(0, 2 * math.pi)
        theta = rng.uniform(0.05, math.pi - 0.05)
        psi = rng.uniform(0, 2 * math.pi)
        ds = wedge_dataset(phi0, theta)
        w = np.array([math.cos(psi), math.sin(psi)])
        dec = decompose_min_norm(ds, np.ones(2, dtype=bool), w)
        exact = wedge_sharpness(phi0, theta, psi)
        worst2 = max(worst2, abs(dec.sharpness - exact) / exact)
        min_sharp = min(min_sharp, dec.sharpness)
    for s in range(spatial):
        ds = generate_dataset(5, 3, seed=1000 + s)
        r = np.random.default_rng(derive_seed(s, "oracle"))
        D = (ds.X @ r.standard_normal(3)) >= 0
        w = r.standard_normal(3)
        w /= np.linalg.norm(w)
        dec = decompose_min_norm(ds, D, w)
        ref = conic_oracle(ds, D, w)
        worst3 = max(worst3, abs(dec.norm_sum - ref) / ref)
        min_sharp = min(min_sharp, dec.sharpness)
    ok = worst2 <= rtol and worst3 <= rtol and min_sharp >= 1.0
    return CheckResult(
        "decomposition", ok,
        f"planar worst relative error {worst2:.1e}, d=3 worst {worst3:.1e}, smallest sharpness {min_sharp:.6f}",
    )


def check_mapping_identity(collected: Optional[list] = None, rtol: float = 1e-8, extra: int = 10) -> CheckResult:
    items = list(collected or [])
    for s in range(extra):
        ds = generate_dataset(4, 2, 0.1, seed=s)
        ps = enumerate_patterns(ds)
        items.append((ds, ps, solve_cone_constrained(ds, ps)))
    worst = 0.0
    checked = 0
    for ds, ps, sol in items:
        if not sol.certified:
            continue
        net = convex_to_network(sol, ps)
        worst = max(worst, abs(network_loss(ds, net) - sol.objective) / max(sol.objective, 1e-300))
        checked += 1
    return CheckResult("mapping_identity", checked > 0 and worst <= rtol,
                       f"worst relative loss mismatch {worst:.1e} over {checked} certified cone solutions")


def _drift_trial(seed: int) -> float:
    ds = generate_dataset(200, 50, 1e-3, seed=seed)
    p0 = init_network(100, 50, derive_seed(seed, "network"))
    trace, _ = train_gd(ds, p0, "backtracking", 2000, stop_at_stationary=False)
    return trace.drift_fraction


def check_drift(seeds: int = 100, need: int = 90, jobs: int = 1) -> CheckResult:
    drifts = parallel_map(_drift_trial, range(seeds), jobs)
    hits = sum(f < 0.5 for f in drifts)
    return CheckResult(
        "drift", hits >= need,
        f"drift below 1/2 in {hits}/{seeds} (need {need}); max drift {max(drifts):.3f}",
        details={"drifts": drifts},
    )


def _chain_trial(seed: int, n: int = 8, d: int = 2, m: int = 20, beta: float = 0.1, steps: int = 20000):
    ds = generate_dataset(n, d, beta, seed=seed)
    p0 = init_network(m, d, derive_seed(seed, "network"))
    trace, p = train_gd(ds, p0, "backtracking", steps)
    full = enumerate_patterns(ds)
    opt = solve_cone_constrained(ds, full)
    induced = network_to_convex_patterns(p, ds)
    ind = solve_cone_constrained(ds, induced)
    return {
        "converged": trace.converged,
        "drift": trace.drift_fraction,
        "loss": float(trace.losses[-1]),
        "optimum": opt.objective,
        "optimum_dual": opt.dual_value,
        "induced": ind.objective,
        "factor": width_factor(n / d, n),
        "solutions": [(ds, full, opt), (ds, induced, ind)],
    }


def check_stationary_chain(trials: int = 20, collected: Optional[list] = None) -> CheckResult:
    """Converged gradient descent with drift below 1/2 stays within the
    width factor of the enumerated convex optimum."""
    runs = [_chain_trial(s) for s in range(trials)]
    used = [r for r in runs if r["converged"] and r["drift"] < 0.5]
    if collected is not None:
        for r in runs:
            collected.extend(r["solutions"])
    within = all(r["loss"] <= r["factor"] * r["optimum"] for r in used)
    above = all(r["loss"] >= r["optimum_dual"] for r in used)
    worst = max((r["loss"] / r["optimum"] for r in used), default=float("nan"))
    return CheckResult(
        "stationary_chain", bool(used) and within and above,
        f"{len(used)}/{trials} runs converged with drift < 1/2; all within factor={within}; "
        f"worst loss ratio {worst:.4f}",
        details={"runs": [{k: v for k, v in r.items() if k != "solutions"} for r in runs]},
    )


# -- driver ------------------------------------------------------------------------


CHECKS = (
    "width_plateau",
    "l2_closed_form",
    "exact_fit",
    "sandwich",
    "end_to_end_width",
    "gram_eigenvalue",
    "gram_monte_carlo",
    "decomposition",
    "mapping_identity",
    "drift",
    "stationary_chain",
)


def run_checks(
    only: Optional[list] = None,
    *,
    jobs: int = 1,
    conic_oracle: Optional[Callable] = None,
    report: Optional[Callable[[CheckResult], None]] = None,
) -> list[CheckResult]:
    """Run the selected checks (all by default) in the canonical order.

    The mapping identity check always covers the cone solutions produced
    by the pipeline and stationary-chain checks that ran before it, so it
    is scheduled after both of them.
    """
    selected = list(CHECKS) if only is None else [k for k in CHECKS if k in set(only)]
    unknown = set(only or []) - set(CHECKS)
    if unknown:
        raise ValueError(f"unknown checks: {sorted(unknown)}")
    order = [k for k in selected if k != "mapping_identity"]
    if "mapping_identity" in selected:
        order.append("mapping_identity")
    collected: list = []
    calls = {
        "width_plateau": lambda: check_width_plateau(),
        "l2_closed_form": lambda: check_l2_closed_form(),
        "exact_fit": lambda: check_exact_fit(),
        "sandwich": lambda: check_sandwich(),
        "end_to_end_width": lambda: check_end_to_end_width(collected=collected),
        "gram_eigenvalue": lambda: check_gram_eigenvalue(),
        "gram_monte_carlo": lambda: check_gram_monte_carlo(),
        "decomposition": lambda: check_decomposition(conic_oracle=conic_oracle),
        "mapping_identity": lambda: check_mapping_identity(collected),
        "drift": lambda: check_drift(jobs=jobs),
        "stationary_chain": lambda: check_stationary_chain(collected=collected),
    }
    results = {}
    for key in order:
        start = time.perf_counter()
        res = calls[key]()
        res.seconds = time.perf_counter() - start
        results[key] = res
        if report is not None:
            report(res)
    return [results[k] for k in selected]
